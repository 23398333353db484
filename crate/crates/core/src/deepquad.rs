//! Deep quadratic boolean functions and their layerwise learner.
//!
//! Over uniform `±1` inputs the monomials `chi_S(x) = prod_{i in S} x_i`
//! form an orthonormal basis, so any target decomposes as
//! `f = sum_S fhat_S chi_S`. A *deep quadratic* target has support shaped
//! like a binary forest: only sizes `2^k` occur, sets of one size are
//! pairwise disjoint, and every larger set splits uniquely into two sets of
//! the level below. Such targets are learned level by level: estimate all
//! quadratic coefficients over the previous level's recovered units, keep
//! those above `c_min/2`, multiply the recovered unit pairs to form the next
//! level's features, subtract, recurse. Disjointness makes the recovered
//! units independent Rademacher variables again, which is exactly why the
//! residual signal stays clean across levels.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// A support set, kept sorted.
pub type IndexSet = Vec<u32>;

/// A sampled deep quadratic target.
///
/// Serialized as JSON with index sets as sorted integer arrays; the
/// coefficient map becomes an array of `[set, value]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepQuadTarget {
    /// Input dimension.
    pub dim: usize,
    /// `levels[k]` lists the size-`2^(k+1)` support sets.
    pub levels: Vec<Vec<IndexSet>>,
    /// Nonzero Fourier coefficients, keyed by support set.
    #[serde(with = "coefficient_pairs")]
    pub coefficients: BTreeMap<IndexSet, f64>,
    /// Lower bound on nonzero coefficient magnitudes the target was
    /// sampled with.
    pub c_min: f64,
}

/// JSON cannot key objects by integer arrays, so the coefficient map is
/// stored as ordered `[set, value]` pairs.
mod coefficient_pairs {
    use super::IndexSet;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<IndexSet, f64>,
        ser: S,
    ) -> Result<S::Ok, S::Error> {
        let pairs: Vec<(&IndexSet, &f64)> = map.iter().collect();
        pairs.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> Result<BTreeMap<IndexSet, f64>, D::Error> {
        let pairs: Vec<(IndexSet, f64)> = Vec::deserialize(de)?;
        Ok(pairs.into_iter().collect())
    }
}

impl DeepQuadTarget {
    /// Checks the forest structure: power-of-two sizes, within-level
    /// disjointness, unique split of every higher set, coefficients at
    /// least `c_min` in magnitude.
    pub fn validate(&self) -> Result<()> {
        for (k, level) in self.levels.iter().enumerate() {
            let size = 1usize << (k + 1);
            let mut used = std::collections::HashSet::new();
            for set in level {
                if set.len() != size {
                    return Err(Error::InvalidParams(format!(
                        "level {} set {set:?} has size {}, expected {size}",
                        k + 1,
                        set.len()
                    )));
                }
                if set.iter().any(|&i| i as usize >= self.dim) {
                    return Err(Error::InvalidParams(format!(
                        "index out of range in {set:?}"
                    )));
                }
                if set.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidParams(format!("set {set:?} is not sorted")));
                }
                for &i in set {
                    if !used.insert(i) {
                        return Err(Error::InvalidParams(format!(
                            "index {i} appears twice at level {}",
                            k + 1
                        )));
                    }
                }
                if k > 0 {
                    let halves: Vec<&IndexSet> = self.levels[k - 1]
                        .iter()
                        .filter(|below| below.iter().all(|i| set.contains(i)))
                        .collect();
                    if halves.len() != 2 {
                        return Err(Error::InvalidParams(format!(
                            "set {set:?} does not split into two level-{k} sets"
                        )));
                    }
                }
                match self.coefficients.get(set) {
                    Some(c) if c.abs() >= self.c_min => {}
                    Some(c) => {
                        return Err(Error::InvalidParams(format!(
                            "coefficient {c} of {set:?} is below c_min = {}",
                            self.c_min
                        )))
                    }
                    None => {
                        return Err(Error::InvalidParams(format!(
                            "missing coefficient for {set:?}"
                        )))
                    }
                }
            }
        }
        let support: usize = self.levels.iter().map(|l| l.len()).sum();
        if self.coefficients.len() != support {
            return Err(Error::InvalidParams(
                "coefficients outside the declared support".into(),
            ));
        }
        Ok(())
    }
}

/// Samples a target with `level_sizes[k]` sets of size `2^(k+1)`:
/// a random disjoint pairing of coordinates at level 1, then random pairings
/// of surviving units upward. Coefficients are uniform on `±[c_min, 1]`.
pub fn sample_target(
    dim: usize,
    level_sizes: &[usize],
    c_min: f64,
    rng: &mut RngStream,
) -> Result<DeepQuadTarget> {
    if !(c_min > 0.0 && c_min <= 1.0) {
        return Err(Error::InvalidParams(format!(
            "c_min must be in (0, 1], got {c_min}"
        )));
    }
    if level_sizes.is_empty() || level_sizes[0] == 0 {
        return Err(Error::InvalidParams(
            "need at least one level-1 pair".into(),
        ));
    }
    if 2 * level_sizes[0] > dim {
        return Err(Error::InvalidParams(format!(
            "{} level-1 pairs need {} coordinates, input has {dim}",
            level_sizes[0],
            2 * level_sizes[0]
        )));
    }
    for k in 1..level_sizes.len() {
        if 2 * level_sizes[k] > level_sizes[k - 1] {
            return Err(Error::InvalidParams(format!(
                "level {} wants {} sets but level {} only offers {}",
                k + 1,
                level_sizes[k],
                k,
                level_sizes[k - 1]
            )));
        }
    }

    let mut coords: Vec<u32> = (0..dim as u32).collect();
    rng.shuffle(&mut coords);
    let mut levels: Vec<Vec<IndexSet>> = Vec::with_capacity(level_sizes.len());
    let first: Vec<IndexSet> = (0..level_sizes[0])
        .map(|i| {
            let mut set = vec![coords[2 * i], coords[2 * i + 1]];
            set.sort_unstable();
            set
        })
        .collect();
    levels.push(first);

    for &size in &level_sizes[1..] {
        let below = levels.last().unwrap().clone();
        let mut order: Vec<usize> = (0..below.len()).collect();
        rng.shuffle(&mut order);
        let level: Vec<IndexSet> = (0..size)
            .map(|i| {
                let mut set = below[order[2 * i]].clone();
                set.extend_from_slice(&below[order[2 * i + 1]]);
                set.sort_unstable();
                set
            })
            .collect();
        levels.push(level);
    }

    let mut coefficients = BTreeMap::new();
    for level in &levels {
        for set in level {
            let magnitude = c_min + (1.0 - c_min) * rng.uniform();
            let sign = if rng.range(2) == 0 { 1.0 } else { -1.0 };
            coefficients.insert(set.clone(), sign * magnitude);
        }
    }

    let target = DeepQuadTarget {
        dim,
        levels,
        coefficients,
        c_min,
    };
    target.validate()?;
    Ok(target)
}

fn check_pm_one(x: &[i8], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(Error::shape(
            format!("{dim} entries"),
            format!("{}", x.len()),
        ));
    }
    if let Some(&bad) = x.iter().find(|&&v| v != 1 && v != -1) {
        return Err(Error::Domain(format!("input entry {bad} is not ±1")));
    }
    Ok(())
}

/// Evaluates the target: `sum_S fhat_S prod_{i in S} x_i`.
pub fn eval_target(target: &DeepQuadTarget, x: &[i8]) -> Result<f64> {
    check_pm_one(x, target.dim)?;
    let mut total = 0.0;
    for (set, &c) in &target.coefficients {
        let mut prod = 1.0;
        for &i in set {
            prod *= x[i as usize] as f64;
        }
        total += c * prod;
    }
    Ok(total)
}

/// One recovered unit: a pair of units from the level below (coordinates at
/// level 1) with its estimated coefficient and full underlying index set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredUnit {
    pub members: (usize, usize),
    pub coefficient: f64,
    pub support: IndexSet,
}

/// The layerwise-recovered model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepQuadModel {
    pub dim: usize,
    pub levels: Vec<Vec<RecoveredUnit>>,
    pub c_min: f64,
}

impl DeepQuadModel {
    /// Sorted support sets per level, for recovery comparisons.
    pub fn support(&self) -> Vec<Vec<IndexSet>> {
        self.levels
            .iter()
            .map(|level| {
                let mut sets: Vec<IndexSet> = level.iter().map(|u| u.support.clone()).collect();
                sets.sort();
                sets
            })
            .collect()
    }
}

/// Evaluates the model: layerwise `y` recursion, coefficient-weighted sum.
pub fn eval_model(model: &DeepQuadModel, x: &[i8]) -> Result<f64> {
    check_pm_one(x, model.dim)?;
    let mut prev: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let mut total = 0.0;
    for level in &model.levels {
        let mut next = Vec::with_capacity(level.len());
        for unit in level {
            let y = prev[unit.members.0] * prev[unit.members.1];
            total += unit.coefficient * y;
            next.push(y);
        }
        prev = next;
    }
    Ok(total)
}

/// Where the learner's per-level samples come from.
#[derive(Debug, Clone, Copy)]
pub enum SampleSource {
    /// Fresh uniform samples per level.
    Random { per_level: usize },
    /// All `2^d` inputs: coefficient estimates become exact expectations.
    Exhaustive,
}

/// Learns a deep quadratic target layerwise from `(x, f(x))` access.
///
/// Level 1 estimates `c_ij = Ê[f(x) x_i x_j]` for every pair, keeps
/// `|c| > c_min/2` with greedy disjointness resolution by descending
/// magnitude, forms the recovered products, subtracts, and recurses on
/// quadratic features of the previous level's units until nothing survives
/// the threshold. Two *conflicting* candidates that are both at least
/// `c_min` in magnitude cannot come from a valid target and raise an
/// ambiguous-support error; weaker conflicts are dropped as noise.
pub fn learn_layerwise<F>(
    target_fn: F,
    dim: usize,
    c_min: f64,
    source: SampleSource,
    rng: &mut RngStream,
) -> Result<DeepQuadModel>
where
    F: Fn(&[i8]) -> f64,
{
    if let SampleSource::Random { per_level } = source {
        if per_level == 0 {
            return Err(Error::InvalidParams(
                "need at least one sample per level".into(),
            ));
        }
    }
    if matches!(source, SampleSource::Exhaustive) && dim > 24 {
        return Err(Error::InvalidParams(format!(
            "exhaustive enumeration over 2^{dim} inputs refused"
        )));
    }

    let mut model = DeepQuadModel {
        dim,
        levels: Vec::new(),
        c_min,
    };
    loop {
        let units = if model.levels.is_empty() {
            dim
        } else {
            model.levels.last().unwrap().len()
        };
        if units < 2 {
            break;
        }

        // Draw this level's dataset and evaluate the current residual and
        // unit values per sample.
        let inputs: Vec<Vec<i8>> = match source {
            SampleSource::Exhaustive => (0..1usize << dim)
                .map(|bits| {
                    (0..dim)
                        .map(|i| if bits >> i & 1 == 1 { 1 } else { -1 })
                        .collect()
                })
                .collect(),
            SampleSource::Random { per_level } => (0..per_level)
                .map(|_| {
                    (0..dim)
                        .map(|_| if rng.range(2) == 1 { 1i8 } else { -1 })
                        .collect()
                })
                .collect(),
        };
        let n = inputs.len();
        let mut unit_values: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut residuals: Vec<f64> = Vec::with_capacity(n);
        for x in &inputs {
            let mut prev: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            let mut fitted = 0.0;
            for level in &model.levels {
                let mut next = Vec::with_capacity(level.len());
                for unit in level {
                    let y = prev[unit.members.0] * prev[unit.members.1];
                    fitted += unit.coefficient * y;
                    next.push(y);
                }
                prev = next;
            }
            unit_values.push(prev);
            residuals.push(target_fn(x) - fitted);
        }

        // All quadratic coefficients over the current units, in parallel
        // over pairs with a fixed per-pair summation order.
        let pairs: Vec<(usize, usize)> = (0..units)
            .flat_map(|i| ((i + 1)..units).map(move |j| (i, j)))
            .collect();
        let estimates: Vec<f64> = crate::par::map_indexed(pairs.len(), |p| {
            let (i, j) = pairs[p];
            let terms: Vec<f64> = (0..n)
                .map(|t| residuals[t] * unit_values[t][i] * unit_values[t][j])
                .collect();
            crate::par::pairwise_sum(&terms) / n as f64
        });

        // Threshold, then greedy disjointness by descending magnitude.
        let mut candidates: Vec<(f64, usize, usize)> = pairs
            .iter()
            .zip(&estimates)
            .filter(|(_, &c)| c.abs() > c_min / 2.0)
            .map(|(&(i, j), &c)| (c, i, j))
            .collect();
        candidates.sort_by(|a, b| {
            b.0.abs()
                .partial_cmp(&a.0.abs())
                .unwrap()
                .then_with(|| (a.1, a.2).cmp(&(b.1, b.2)))
        });
        let mut taken = vec![false; units];
        let mut level_units: Vec<RecoveredUnit> = Vec::new();
        for (c, i, j) in candidates {
            if taken[i] || taken[j] {
                if c.abs() >= c_min {
                    return Err(Error::AmbiguousSupport(format!(
                        "pair ({i}, {j}) with coefficient {c:.6} overlaps an already \
                         recovered unit; the target is not deep quadratic"
                    )));
                }
                continue; // sub-c_min conflict: noise, dropped
            }
            taken[i] = true;
            taken[j] = true;
            let support = if model.levels.is_empty() {
                let mut set = vec![i as u32, j as u32];
                set.sort_unstable();
                set
            } else {
                let below = model.levels.last().unwrap();
                let mut set = below[i].support.clone();
                set.extend_from_slice(&below[j].support);
                set.sort_unstable();
                set
            };
            level_units.push(RecoveredUnit {
                members: (i, j),
                coefficient: c,
                support,
            });
        }

        if level_units.is_empty() {
            break;
        }
        model.levels.push(level_units);
    }

    refit_coefficients(&target_fn, source, rng, &mut model)?;
    Ok(model)
}

/// Joint least-squares refit of every recovered coefficient on a fresh
/// dataset. The recovered features are orthonormal monomials; when the
/// support is exact the target lies in their span, so the refit interpolates
/// and the thresholding estimator's `O(||f||/sqrt(N))` noise drops out.
fn refit_coefficients<F>(
    target_fn: &F,
    source: SampleSource,
    rng: &mut RngStream,
    model: &mut DeepQuadModel,
) -> Result<()>
where
    F: Fn(&[i8]) -> f64,
{
    let k: usize = model.levels.iter().map(|l| l.len()).sum();
    if k == 0 {
        return Ok(());
    }
    let dim = model.dim;
    let inputs: Vec<Vec<i8>> = match source {
        SampleSource::Exhaustive => (0..1usize << dim)
            .map(|bits| {
                (0..dim)
                    .map(|i| if bits >> i & 1 == 1 { 1 } else { -1 })
                    .collect()
            })
            .collect(),
        SampleSource::Random { per_level } => (0..per_level)
            .map(|_| {
                (0..dim)
                    .map(|_| if rng.range(2) == 1 { 1i8 } else { -1 })
                    .collect()
            })
            .collect(),
    };
    let n = inputs.len();
    let mut gram = ndarray::Array2::<f64>::zeros((k, k));
    let mut rhs = ndarray::Array2::<f64>::zeros((k, 1));
    let mut feat = vec![0.0; k];
    for x in &inputs {
        let mut prev: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let mut fi = 0;
        for level in &model.levels {
            let mut next = Vec::with_capacity(level.len());
            for unit in level {
                let y = prev[unit.members.0] * prev[unit.members.1];
                feat[fi] = y;
                fi += 1;
                next.push(y);
            }
            prev = next;
        }
        let target = target_fn(x);
        for a in 0..k {
            rhs[[a, 0]] += feat[a] * target;
            for b in 0..k {
                gram[[a, b]] += feat[a] * feat[b];
            }
        }
    }
    gram.mapv_inplace(|v| v / n as f64);
    rhs.mapv_inplace(|v| v / n as f64);
    let solution = crate::linalg::solve_spd(gram, rhs.view())?;
    let mut fi = 0;
    for level in &mut model.levels {
        for unit in level {
            unit.coefficient = solution[[fi, 0]];
            fi += 1;
        }
    }
    Ok(())
}
