//! Named parameter and buffer storage shared by the trainer, the optimizer,
//! and checkpoint I/O.
//!
//! Binarizable weights are stored as [`LatentWeight`] shadows; everything else
//! as dense tensors. Buffers (batch-norm running statistics) are saved with
//! checkpoints but never optimized.

use ndarray::{Array1, Array2, ArrayD};

use crate::binarize::LatentWeight;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue {
    Dense(ArrayD<f64>),
    Latent(LatentWeight),
}

impl ParamValue {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            ParamValue::Dense(a) => a.shape().to_vec(),
            ParamValue::Latent(w) => vec![w.out_features(), w.in_features()],
        }
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dense view of the stored values (the shadow for latent weights).
    pub fn to_array(&self) -> ArrayD<f64> {
        match self {
            ParamValue::Dense(a) => a.clone(),
            ParamValue::Latent(w) => w.shadow().clone().into_dyn(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: ParamValue,
}

#[derive(Debug, Clone)]
pub struct BufferEntry {
    pub name: String,
    pub value: Array1<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<ParamEntry>,
    buffers: Vec<BufferEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add_dense(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        self.params.push(ParamEntry { name: name.into(), value: ParamValue::Dense(value) });
        ParamId(self.params.len() - 1)
    }

    pub fn add_latent(&mut self, name: impl Into<String>, shadow: Array2<f64>) -> ParamId {
        self.params.push(ParamEntry {
            name: name.into(),
            value: ParamValue::Latent(LatentWeight::new(shadow)),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Array1<f64>) -> BufferId {
        self.buffers.push(BufferEntry { name: name.into(), value });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &ParamEntry {
        &self.params[id.0]
    }

    pub fn latent(&self, id: ParamId) -> &LatentWeight {
        match &self.params[id.0].value {
            ParamValue::Latent(w) => w,
            ParamValue::Dense(_) => panic!("param {} is not a latent weight", self.params[id.0].name),
        }
    }

    pub fn buffer(&self, id: BufferId) -> &Array1<f64> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Array1<f64> {
        &mut self.buffers[id.0].value
    }

    pub fn num_tensors(&self) -> usize {
        self.params.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.params.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn iter_buffers(&self) -> impl Iterator<Item = &BufferEntry> {
        self.buffers.iter()
    }

    /// In-place update through a flat mutable view; latent weights refresh
    /// their cached row means afterwards.
    pub fn apply_update<F: FnOnce(&mut [f64])>(&mut self, id: ParamId, f: F) {
        match &mut self.params[id.0].value {
            ParamValue::Dense(a) => f(a.as_slice_mut().expect("contiguous param")),
            ParamValue::Latent(w) => {
                w.update(|shadow| f(shadow.as_slice_mut().expect("contiguous shadow")));
            }
        }
    }

    /// Replace a parameter's values from a dense array of matching shape.
    pub fn set_from_array(&mut self, id: ParamId, values: &ArrayD<f64>) {
        assert_eq!(self.params[id.0].value.shape(), values.shape(), "param shape mismatch");
        match &mut self.params[id.0].value {
            ParamValue::Dense(a) => a.assign(values),
            ParamValue::Latent(w) => {
                let v2 = values.clone().into_dimensionality::<ndarray::Ix2>().expect("rank 2");
                w.update(|shadow| shadow.assign(&v2));
            }
        }
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        self.buffers.iter().position(|b| b.name == name).map(BufferId)
    }
}
