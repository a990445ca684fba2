use super::tensor::Tensor;
use super::DiffError;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters with matching gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    pub dropout_rate: f64,
}

impl ParamStore {
    pub fn new(dropout_rate: f64) -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            dropout_rate,
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter name {name}");
        self.grads.push(Tensor::zeros_like(&value));
        self.values.push(value);
        self.names.push(name);
        ParamId(self.values.len() - 1)
    }

    /// Registers a parameter drawn uniformly from `±1/√fan_in`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::with_shape(shape.to_vec(), data))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    pub fn accumulate(&mut self, g: &Gradients) {
        for (slot, gi) in self.grads.iter_mut().zip(&g.per_param) {
            if let Some(gi) = gi {
                slot.add_assign(gi);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Name → tensor map, sorted by name.
    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }

    /// Overwrites every parameter from `map`; names and shapes must match exactly.
    pub fn load_map(&mut self, map: &BTreeMap<String, Tensor>) -> Result<(), DiffError> {
        if map.len() != self.names.len() {
            return Err(DiffError::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.names.len(),
                map.len()
            )));
        }
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let t = map
                .get(name)
                .ok_or_else(|| DiffError::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != value.shape() {
                return Err(DiffError::Checkpoint(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    t.shape(),
                    value.shape()
                )));
            }
            *value = t.clone();
        }
        Ok(())
    }

    /// Like [`load_map`](Self::load_map) but ignores entries this store does
    /// not own, so one map can feed several stores.
    pub fn load_owned(&mut self, map: &BTreeMap<String, Tensor>) -> Result<(), DiffError> {
        let own: BTreeMap<String, Tensor> = self
            .names
            .iter()
            .filter_map(|n| map.get(n).map(|t| (n.clone(), t.clone())))
            .collect();
        self.load_map(&own)
    }
}

/// Gradients from one backward pass, indexed like the store that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    per_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn for_store(store: &ParamStore) -> Self {
        Self {
            per_param: vec![None; store.len()],
        }
    }

    pub(crate) fn add(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.per_param[id.0] {
            Some(t) => t.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.per_param[id.0].as_ref()
    }

    /// Sums `other` into `self`.
    pub fn merge(&mut self, other: &Gradients) {
        for (a, b) in self.per_param.iter_mut().zip(&other.per_param) {
            if let Some(b) = b {
                match a {
                    Some(a) => a.add_assign(b),
                    None => *a = Some(b.clone()),
                }
            }
        }
    }
}

/// On-disk checkpoint: parameter name → shape + flat values, a config echo
/// and optional training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: serde_json::Value,
    pub params: BTreeMap<String, TensorDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDoc {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config: serde_json::Value) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config,
            params: store
                .to_map()
                .into_iter()
                .map(|(k, t)| {
                    (
                        k,
                        TensorDoc {
                            shape: t.shape().to_vec(),
                            data: t.into_data(),
                        },
                    )
                })
                .collect(),
            state: None,
        }
    }

    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>, DiffError> {
        self.params
            .iter()
            .map(|(k, d)| Ok((k.clone(), Tensor::new(d.shape.clone(), d.data.clone())?)))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("checkpoint serialization cannot fail");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, DiffError> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(DiffError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new(0.1);
        store.add_uniform("w", &[7, 5], 7, &mut rng);
        store.add_uniform("b", &[5], 7, &mut rng);
        store.add("tiny", Tensor::vector(vec![1e-300, -0.1, 1.0 / 3.0, f64::MIN_POSITIVE]));
        let ck = Checkpoint::from_store(&store, serde_json::json!({"embed_dim": 5}));
        let text = ck.to_json();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        let mut other = store.clone();
        for id in other.ids().collect::<Vec<_>>() {
            other.value_mut(id).data_mut().fill(0.0);
        }
        other.load_map(&back.tensors().unwrap()).unwrap();
        for id in store.ids() {
            let a: Vec<u64> = store.value(id).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = other.value(id).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn load_rejects_shape_changes() {
        let mut store = ParamStore::new(0.0);
        store.add("w", Tensor::zeros(&[2, 2]));
        let mut map = BTreeMap::new();
        map.insert("w".to_string(), Tensor::zeros(&[3]));
        assert!(store.load_map(&map).is_err());
        map.clear();
        assert!(store.load_map(&map).is_err());
    }
}
