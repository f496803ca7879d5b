use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partition {
    Backbone,
    Fusion,
    Projection,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Backbone, Partition::Fusion, Partition::Projection];

    pub fn code(self) -> u8 {
        match self {
            Self::Backbone => 0,
            Self::Fusion => 1,
            Self::Projection => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Self::Backbone),
            1 => Some(Self::Fusion),
            2 => Some(Self::Projection),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Backbone => "backbone",
            Self::Fusion => "fusion",
            Self::Projection => "projection",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub partition: Partition,
    pub value: Matrix,
}

/// Named tensors in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new(params: Vec<Param>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Self { params, index }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn by_index(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    pub fn count(&self, part: Partition) -> usize {
        self.params
            .iter()
            .filter(|p| p.partition == part)
            .map(|p| p.value.data().len())
            .sum()
    }

    /// SHA-256 over names, shapes and exact bit patterns of one partition.
    pub fn checksum(&self, part: Partition) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.partition == part) {
            h.update(p.name.as_bytes());
            h.update((p.value.rows() as u64).to_le_bytes());
            h.update((p.value.cols() as u64).to_le_bytes());
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// First 8 checksum bytes as hex, for logs.
    pub fn checksum_hex(&self, part: Partition) -> String {
        self.checksum(part)[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
