//! CFG-induced Random Hierarchy Model instances.
//!
//! An instance is a complete `s`-ary generative tree over `L + 1` levels:
//! level 0 holds the label, level `L` the observed tokens. Every level has
//! the same vocabulary `0..V`, every symbol owns exactly `m` production
//! rules (each an `s`-tuple over the next level's vocabulary), and no patch
//! is producible by two symbols, so decoding is exact.
//!
//! Sampling follows the first-token-uniform construction: per level, each
//! first token gets `m` distinct suffixes drawn without replacement from
//! `V^(s-1)`, and the pooled `V·m` candidate patches are randomly cut into
//! consecutive blocks of `m`, one block per parent symbol.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// A vocabulary symbol. Dense integers `0..V` at every level.
pub type Symbol = u16;

/// Grammar shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RhmParams {
    /// Number of generative levels below the label.
    #[serde(rename = "L")]
    pub levels: usize,
    /// Branching factor: tokens per patch.
    #[serde(rename = "s")]
    pub branching: usize,
    /// Vocabulary size at every level.
    #[serde(rename = "V")]
    pub vocab: usize,
    /// Production rules per symbol.
    #[serde(rename = "m")]
    pub rules_per_symbol: usize,
    /// Seed the instance was (or will be) sampled with.
    pub seed: u64,
}

impl RhmParams {
    pub fn new(
        levels: usize,
        branching: usize,
        vocab: usize,
        rules_per_symbol: usize,
        seed: u64,
    ) -> Self {
        RhmParams {
            levels,
            branching,
            vocab,
            rules_per_symbol,
            seed,
        }
    }

    /// Checks the documented parameter invariants.
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidParams("L must be positive".into()));
        }
        if self.branching < 2 {
            return Err(Error::InvalidParams("s must be at least 2".into()));
        }
        if self.vocab == 0 || self.vocab > Symbol::MAX as usize + 1 {
            return Err(Error::InvalidParams(format!(
                "V must be in 1..={}",
                Symbol::MAX as usize + 1
            )));
        }
        if self.rules_per_symbol == 0 {
            return Err(Error::InvalidParams("m must be positive".into()));
        }
        let suffix_space = self.suffix_space().ok_or_else(|| {
            Error::InvalidParams("V^(s-1) exceeds the supported 2^64 patch space".into())
        })?;
        if self.rules_per_symbol as u64 > suffix_space {
            return Err(Error::InvalidParams(format!(
                "m = {} exceeds V^(s-1) = {}: cannot give each first token m distinct suffixes",
                self.rules_per_symbol, suffix_space
            )));
        }
        // V·m <= V^s follows from m <= V^(s-1); checked anyway as a guard
        // against inconsistent hand-edited files.
        let patch_space = suffix_space.checked_mul(self.vocab as u64).ok_or_else(|| {
            Error::InvalidParams("V^s exceeds the supported 2^64 patch space".into())
        })?;
        if (self.vocab * self.rules_per_symbol) as u64 > patch_space {
            return Err(Error::InvalidParams(
                "V·m exceeds the patch space V^s".into(),
            ));
        }
        if self.input_len().is_none() {
            return Err(Error::InvalidParams("s^L overflows usize".into()));
        }
        Ok(())
    }

    /// `V^(s-1)`, if it fits in a `u64`.
    fn suffix_space(&self) -> Option<u64> {
        let mut acc: u64 = 1;
        for _ in 0..self.branching - 1 {
            acc = acc.checked_mul(self.vocab as u64)?;
        }
        Some(acc)
    }

    /// Input sequence length `s^L`.
    pub fn input_len(&self) -> Option<usize> {
        self.branching.checked_pow(self.levels as u32)
    }

    /// Number of possible patches per level, `V·m`.
    pub fn patches_per_level(&self) -> usize {
        self.vocab * self.rules_per_symbol
    }
}

/// One generated sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// The `s^L` observed tokens.
    pub tokens: Vec<Symbol>,
    /// The root label the sentence was generated from.
    pub label: Symbol,
    /// When present, `intermediates[l]` is the level-`l` sequence
    /// (length `s^l`) for `l = 0..L-1`; `intermediates[0] = [label]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intermediates: Option<Vec<Vec<Symbol>>>,
}

/// One named invariant check of a validation report.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationCheck {
    pub name: &'static str,
    pub pass: bool,
    /// First counterexample, when the check fails.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// Outcome of checking every instance invariant.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<ValidationCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn first_failure(&self) -> Option<&ValidationCheck> {
        self.checks.iter().find(|c| !c.pass)
    }
}

/// A sampled grammar with derived decode tables.
#[derive(Debug, Clone, PartialEq)]
pub struct RhmInstance {
    params: RhmParams,
    /// `rules[l][nu]` lists the `m` patches symbol `nu` at level `l`
    /// rewrites to, each a length-`s` tuple over level-`(l+1)` symbols.
    rules: Vec<Vec<Vec<Vec<Symbol>>>>,
    /// `decode[l]` maps a level-`(l+1)` patch code to its unique parent.
    decode: Vec<HashMap<usize, Symbol>>,
}

/// Serialized form: params plus the rule tables. Decode maps and synonym
/// classes are derived on load, never stored.
#[derive(Serialize, Deserialize)]
struct InstanceJson {
    params: RhmParams,
    rules: Vec<Vec<Vec<Vec<Symbol>>>>,
}

impl RhmInstance {
    /// Samples a fresh instance. See the module docs for the construction.
    pub fn sample(params: RhmParams, rng: &mut RngStream) -> Result<Self> {
        params.validate()?;
        let v = params.vocab;
        let m = params.rules_per_symbol;
        let s = params.branching;
        let suffix_space = params.suffix_space().expect("validated above");

        let mut rules = Vec::with_capacity(params.levels);
        for level in 0..params.levels {
            let mut level_rng = rng.substream(level as u64);
            // Candidate pool: m distinct suffixes per first token.
            let mut candidates: Vec<Vec<Symbol>> = Vec::with_capacity(v * m);
            for first in 0..v as Symbol {
                for code in level_rng.sample_distinct(suffix_space, m) {
                    let mut patch = Vec::with_capacity(s);
                    patch.push(first);
                    patch.extend(decode_base(code, s - 1, v));
                    candidates.push(patch);
                }
            }
            // Random assignment to parents: shuffle, then cut into blocks of m.
            level_rng.shuffle(&mut candidates);
            let per_symbol: Vec<Vec<Vec<Symbol>>> =
                candidates.chunks(m).map(|c| c.to_vec()).collect();
            rules.push(per_symbol);
        }
        Self::from_rules(params, rules)
    }

    /// Builds an instance from explicit rule tables.
    ///
    /// Enforces well-formedness, `(V,m)`-uniformity and non-ambiguity.
    /// First-token uniformity is *not* required here (hand-built tables may
    /// break it); [`validate`](Self::validate) reports it.
    pub fn from_rules(params: RhmParams, rules: Vec<Vec<Vec<Vec<Symbol>>>>) -> Result<Self> {
        params.validate()?;
        structural_check(&params, &rules)?;
        let report = validate_rules(&params, &rules);
        for check in &report.checks {
            if !check.pass && check.name != "first_token_uniform" {
                return Err(Error::InvalidParams(format!(
                    "{}: {}",
                    check.name,
                    check.detail.as_deref().unwrap_or("failed")
                )));
            }
        }
        let mut decode = Vec::with_capacity(params.levels);
        for level_rules in &rules {
            let mut map = HashMap::with_capacity(params.patches_per_level());
            for (nu, patches) in level_rules.iter().enumerate() {
                for patch in patches {
                    map.insert(patch_code(patch, params.vocab), nu as Symbol);
                }
            }
            decode.push(map);
        }
        Ok(RhmInstance {
            params,
            rules,
            decode,
        })
    }

    pub fn params(&self) -> &RhmParams {
        &self.params
    }

    /// Rule table at rule level `l` (rewrites level-`l` symbols).
    pub fn rules_at(&self, level: usize) -> &[Vec<Vec<Symbol>>] {
        &self.rules[level]
    }

    /// Parent of a level-`patch_level` patch code, if the patch is legal.
    /// `patch_level` runs in `1..=L`.
    pub fn parent_of(&self, patch_level: usize, code: usize) -> Option<Symbol> {
        self.decode[patch_level - 1].get(&code).copied()
    }

    /// All legal patches at `patch_level`, as `(code, parent)` sorted by code.
    pub fn patches(&self, patch_level: usize) -> Vec<(usize, Symbol)> {
        let mut out: Vec<(usize, Symbol)> = self.decode[patch_level - 1]
            .iter()
            .map(|(&c, &p)| (c, p))
            .collect();
        out.sort_unstable();
        out
    }

    /// Synonym classes at `patch_level`: for each parent symbol, the sorted
    /// codes of the patches it generates.
    pub fn synonym_classes(&self, patch_level: usize) -> Vec<Vec<usize>> {
        self.rules[patch_level - 1]
            .iter()
            .map(|patches| {
                let mut codes: Vec<usize> = patches
                    .iter()
                    .map(|p| patch_code(p, self.params.vocab))
                    .collect();
                codes.sort_unstable();
                codes
            })
            .collect()
    }

    /// Encodes a length-`s` patch as an integer in base `V`
    /// (first token most significant).
    pub fn patch_code(&self, patch: &[Symbol]) -> usize {
        patch_code(patch, self.params.vocab)
    }

    /// Generates one sentence: uniform label, then each symbol expanded by a
    /// uniformly chosen rule, level by level.
    pub fn generate_sample(&self, rng: &mut RngStream, keep_intermediates: bool) -> Sample {
        let m = self.params.rules_per_symbol as u64;
        let label = rng.range(self.params.vocab as u64) as Symbol;
        let mut current = vec![label];
        let mut intermediates = keep_intermediates.then(Vec::new);
        for level_rules in &self.rules {
            if let Some(seqs) = intermediates.as_mut() {
                seqs.push(current.clone());
            }
            let mut next = Vec::with_capacity(current.len() * self.params.branching);
            for &sym in &current {
                let choice = rng.range(m) as usize;
                next.extend_from_slice(&level_rules[sym as usize][choice]);
            }
            current = next;
        }
        Sample {
            tokens: current,
            label,
            intermediates,
        }
    }

    /// Exact bottom-up decoding: applies the decode map one patch at a time,
    /// `L` times, and returns the root symbol.
    pub fn decode(&self, tokens: &[Symbol]) -> Result<Symbol> {
        let expect = self.params.input_len().expect("validated");
        if tokens.len() != expect {
            return Err(Error::shape(
                format!("{expect} tokens"),
                format!("{} tokens", tokens.len()),
            ));
        }
        let s = self.params.branching;
        let mut current = tokens.to_vec();
        for level in (0..self.params.levels).rev() {
            let mut next = Vec::with_capacity(current.len() / s);
            for (k, chunk) in current.chunks(s).enumerate() {
                let code = patch_code(chunk, self.params.vocab);
                match self.decode[level].get(&code) {
                    Some(&parent) => next.push(parent),
                    None => {
                        return Err(Error::Undecodable(format!(
                            "patch {:?} (position {k}, level {}) is not in the grammar",
                            chunk,
                            level + 1,
                        )))
                    }
                }
            }
            current = next;
        }
        Ok(current[0])
    }

    /// Checks every instance invariant and reports pass/fail per check.
    pub fn validate(&self) -> ValidationReport {
        validate_rules(&self.params, &self.rules)
    }

    /// Serializes to the documented JSON schema.
    pub fn save(&self) -> String {
        let doc = InstanceJson {
            params: self.params,
            rules: self.rules.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("instance serialization cannot fail")
    }

    /// Parses the documented JSON schema and re-derives decode tables.
    pub fn load(text: &str) -> Result<Self> {
        let doc: InstanceJson = serde_json::from_str(text).map_err(|e| {
            Error::parse(
                format!("line {} column {}", e.line(), e.column()),
                e.to_string(),
            )
        })?;
        Self::from_rules(doc.params, doc.rules)
    }
}

/// Serializes an instance to the documented JSON schema (UTF-8, integers only).
pub fn save_instance(instance: &RhmInstance) -> String {
    instance.save()
}

/// Loads an instance from JSON produced by [`save_instance`].
pub fn load_instance(text: &str) -> Result<RhmInstance> {
    RhmInstance::load(text)
}

/// Patch tuple -> integer in base `V`, first token most significant.
pub fn patch_code(patch: &[Symbol], vocab: usize) -> usize {
    patch
        .iter()
        .fold(0usize, |acc, &t| acc * vocab + t as usize)
}

/// Inverse of [`patch_code`] for a known tuple length.
pub fn patch_from_code(mut code: usize, len: usize, vocab: usize) -> Vec<Symbol> {
    let mut out = vec![0 as Symbol; len];
    for i in (0..len).rev() {
        out[i] = (code % vocab) as Symbol;
        code /= vocab;
    }
    out
}

fn decode_base(mut code: u64, len: usize, vocab: usize) -> Vec<Symbol> {
    let mut out = vec![0 as Symbol; len];
    for i in (0..len).rev() {
        out[i] = (code % vocab as u64) as Symbol;
        code /= vocab as u64;
    }
    out
}

/// Structural well-formedness: table shapes and symbol ranges, with
/// path-named errors for malformed files.
fn structural_check(params: &RhmParams, rules: &[Vec<Vec<Vec<Symbol>>>]) -> Result<()> {
    if rules.len() != params.levels {
        return Err(Error::parse(
            "rules",
            format!("expected {} levels, found {}", params.levels, rules.len()),
        ));
    }
    for (l, level_rules) in rules.iter().enumerate() {
        if level_rules.len() != params.vocab {
            return Err(Error::parse(
                format!("rules[{l}]"),
                format!(
                    "expected {} symbols, found {}",
                    params.vocab,
                    level_rules.len()
                ),
            ));
        }
        for (nu, patches) in level_rules.iter().enumerate() {
            for (i, patch) in patches.iter().enumerate() {
                if patch.len() != params.branching {
                    return Err(Error::parse(
                        format!("rules[{l}][{nu}][{i}]"),
                        format!("patch length {} != s = {}", patch.len(), params.branching),
                    ));
                }
                if let Some(&bad) = patch.iter().find(|&&t| t as usize >= params.vocab) {
                    return Err(Error::parse(
                        format!("rules[{l}][{nu}][{i}]"),
                        format!("symbol {bad} outside 0..{}", params.vocab),
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Checks the instance invariants on a raw rule table.
///
/// Used both by [`RhmInstance::validate`] and by tests that construct
/// deliberate violations (which could never become instances).
pub fn validate_rules(params: &RhmParams, rules: &[Vec<Vec<Vec<Symbol>>>]) -> ValidationReport {
    let mut checks = Vec::new();
    let v = params.vocab;
    let m = params.rules_per_symbol;

    // (V, m)-uniformity: every symbol owns exactly m distinct rules.
    let mut uniform = ValidationCheck {
        name: "vm_uniform",
        pass: true,
        detail: None,
    };
    'uniform: for (l, level_rules) in rules.iter().enumerate() {
        for (nu, patches) in level_rules.iter().enumerate() {
            let mut codes: Vec<usize> = patches.iter().map(|p| patch_code(p, v)).collect();
            codes.sort_unstable();
            codes.dedup();
            if codes.len() != m {
                uniform.pass = false;
                uniform.detail = Some(format!(
                    "symbol {nu} at level {l} owns {} distinct rules, expected {m}",
                    codes.len()
                ));
                break 'uniform;
            }
        }
    }
    checks.push(uniform);

    // Non-ambiguity: no patch has two parents.
    let mut unambiguous = ValidationCheck {
        name: "non_ambiguous",
        pass: true,
        detail: None,
    };
    'ambig: for (l, level_rules) in rules.iter().enumerate() {
        let mut owner: HashMap<usize, usize> = HashMap::new();
        for (nu, patches) in level_rules.iter().enumerate() {
            for patch in patches {
                let code = patch_code(patch, v);
                if let Some(&other) = owner.get(&code) {
                    if other != nu {
                        unambiguous.pass = false;
                        unambiguous.detail = Some(format!(
                            "patch {:?} at level {} has parents {other} and {nu}",
                            patch,
                            l + 1
                        ));
                        break 'ambig;
                    }
                } else {
                    owner.insert(code, nu);
                }
            }
        }
    }
    checks.push(unambiguous);

    // |P_l| = V·m at every level.
    let mut count = ValidationCheck {
        name: "patch_count",
        pass: true,
        detail: None,
    };
    for (l, level_rules) in rules.iter().enumerate() {
        let mut codes: Vec<usize> = level_rules
            .iter()
            .flat_map(|ps| ps.iter().map(|p| patch_code(p, v)))
            .collect();
        codes.sort_unstable();
        codes.dedup();
        if codes.len() != v * m {
            count.pass = false;
            count.detail = Some(format!(
                "level {} has {} distinct patches, expected {}",
                l + 1,
                codes.len(),
                v * m
            ));
            break;
        }
    }
    checks.push(count);

    // First-token uniformity: each symbol opens exactly m patches per level.
    let mut ftu = ValidationCheck {
        name: "first_token_uniform",
        pass: true,
        detail: None,
    };
    'ftu: for (l, level_rules) in rules.iter().enumerate() {
        let mut first_counts = vec![0usize; v];
        for patches in level_rules {
            for patch in patches {
                first_counts[patch[0] as usize] += 1;
            }
        }
        for (tok, &c) in first_counts.iter().enumerate() {
            if c != m {
                ftu.pass = false;
                ftu.detail = Some(format!(
                    "token {tok} opens {c} patches at level {}, expected {m}",
                    l + 1
                ));
                break 'ftu;
            }
        }
    }
    checks.push(ftu);

    ValidationReport { checks }
}
