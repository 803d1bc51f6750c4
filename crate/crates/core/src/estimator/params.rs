use std::ops::Range;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

/// Parameter groups, in layout order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Accel,
    Velocity,
    Euler,
    Main,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Encoder,
        ParamGroup::Accel,
        ParamGroup::Velocity,
        ParamGroup::Euler,
        ParamGroup::Main,
        ParamGroup::Head,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zero,
    Constant(f64),
    /// Uniform in ±sqrt(3 gain / fan_in).
    KaimingUniform { fan_in: usize, gain: f64 },
    /// Orthonormal columns, for recurrent matrices.
    Orthogonal,
    /// Stacked `[i, f, g, o]` gate biases: zero except the forget block.
    GateBias { forget: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub offset: usize,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named views into one flat parameter vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn push(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize], init: Init) -> usize {
        let entry = ParamEntry {
            name: name.into(),
            group,
            offset: self.total,
            shape: shape.to_vec(),
            init,
        };
        self.total += entry.len();
        self.entries.push(entry);
        self.entries.len() - 1
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &ParamEntry {
        &self.entries[index]
    }

    pub fn find(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn group_ranges(&self, group: ParamGroup) -> impl Iterator<Item = Range<usize>> + '_ {
        self.entries.iter().filter(move |e| e.group == group).map(ParamEntry::range)
    }

    /// Zeroes every entry of `groups` in `v`.
    pub fn zero_groups(&self, v: &mut [f64], groups: &[ParamGroup]) {
        for g in groups {
            for r in self.group_ranges(*g) {
                v[r].fill(0.0);
            }
        }
    }

    /// Seed-deterministic initial values.
    pub fn initialize(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = vec![0.0; self.total];
        for e in &self.entries {
            let slot = &mut v[e.range()];
            match e.init {
                Init::Zero => {}
                Init::Constant(c) => slot.fill(c),
                Init::GateBias { forget } => {
                    let h = slot.len() / 4;
                    slot[h..2 * h].fill(forget);
                }
                Init::KaimingUniform { fan_in, gain } => {
                    let bound = (3.0 * gain / fan_in as f64).sqrt();
                    let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                    for x in slot {
                        *x = u.sample(&mut rng);
                    }
                }
                Init::Orthogonal => {
                    let (rows, cols) = (e.shape[0], e.shape[1]);
                    let g = DMatrix::<f64>::from_fn(rows.max(cols), rows.min(cols), |_, _| StandardNormal.sample(&mut rng));
                    let qr = g.qr();
                    let q = qr.q();
                    // Sign-fix so the result does not depend on the QR routine's choice.
                    let r = qr.r();
                    for r_i in 0..rows {
                        for c_i in 0..cols {
                            let (a, b) = if rows >= cols { (r_i, c_i) } else { (c_i, r_i) };
                            let sign = if r[(b, b)] < 0.0 { -1.0 } else { 1.0 };
                            slot[r_i * cols + c_i] = q[(a, b)] * sign;
                        }
                    }
                }
            }
        }
        v
    }
}
