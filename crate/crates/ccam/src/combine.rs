//! Rank-indexed combination functions g(k) and their registry.
//!
//! A combination function assigns one coefficient per class rank: positive
//! weight to the top of the probability ranking, negative weight to the
//! bottom, so that summing the ranked activation maps subtracts background.
//! Every variant sits behind the [`CombinationFn`] trait and is selected at
//! runtime from a spec string such as `poly:eta=2,p=auto` or
//! `topbot:i=1,b=10`.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A rank-to-coefficient strategy over a ranking of `num_classes` classes.
///
/// Ranks are 1-based: rank 1 is the highest-probability class, rank
/// `num_classes` the lowest.
pub trait CombinationFn: fmt::Display + Send + Sync {
    /// Coefficient g(k) for rank `k` (1..=num_classes).
    fn weight(&self, rank: usize, num_classes: usize) -> Result<f64>;

    /// All coefficients g(1)..g(K) as a vector.
    fn weights_vector(&self, num_classes: usize) -> Result<Tensor> {
        let mut out = Vec::with_capacity(num_classes);
        for k in 1..=num_classes {
            out.push(self.weight(k, num_classes)?);
        }
        Tensor::new(&[num_classes], out)
    }
}

/// Pivot of the polynomial function: a fixed rank or the ranking midpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pivot {
    /// (K + 1) / 2, the middle of the ranking.
    Auto,
    Fixed(f64),
}

/// Polynomial weights: +1 at rank 1, zero at the pivot, −1 at rank K,
/// with curvature controlled by the degree.
///
/// Degree 0 degenerates to +1 on ranks up to the pivot and −1 past it
/// (0 to the 0th power reads as 1 here).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Polynomial {
    pub degree: u32,
    pub pivot: Pivot,
}

impl Polynomial {
    pub fn new(degree: u32, pivot: Pivot) -> Self {
        Polynomial { degree, pivot }
    }

    fn resolve_pivot(&self, num_classes: usize) -> Result<f64> {
        let p = match self.pivot {
            Pivot::Auto => (num_classes as f64 + 1.0) / 2.0,
            Pivot::Fixed(p) => p,
        };
        if !(1.0..=num_classes as f64).contains(&p) {
            return Err(Error::invalid(format!(
                "polynomial pivot {p} outside [1, {num_classes}]"
            )));
        }
        Ok(p)
    }
}

/// Quadratic with the midpoint pivot.
impl Default for Polynomial {
    fn default() -> Self {
        Polynomial::new(2, Pivot::Auto)
    }
}

impl CombinationFn for Polynomial {
    fn weight(&self, rank: usize, num_classes: usize) -> Result<f64> {
        check_rank(rank, num_classes)?;
        let p = self.resolve_pivot(num_classes)?;
        let k = rank as f64;
        if self.degree == 0 {
            return Ok(if k <= p { 1.0 } else { -1.0 });
        }
        if k == p {
            return Ok(0.0);
        }
        let eta = self.degree as i32;
        if k <= p {
            Ok(((k - p) / (1.0 - p)).powi(eta))
        } else {
            // (−1)^{η+1}: flips the sign of even degrees.
            let sign = if self.degree.is_multiple_of(2) { -1.0 } else { 1.0 };
            Ok(sign * ((k - p) / (p - num_classes as f64)).powi(eta))
        }
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.pivot {
            Pivot::Auto => write!(f, "poly:eta={}", self.degree),
            Pivot::Fixed(p) => write!(f, "poly:eta={},p={}", self.degree, p),
        }
    }
}

/// +1 on the `top` highest-ranked maps, −1 on the `bottom` lowest, 0 between.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TopBottom {
    pub top: usize,
    pub bottom: usize,
}

impl TopBottom {
    pub fn new(top: usize, bottom: usize) -> Self {
        TopBottom { top, bottom }
    }
}

impl CombinationFn for TopBottom {
    fn weight(&self, rank: usize, num_classes: usize) -> Result<f64> {
        check_rank(rank, num_classes)?;
        if self.top + self.bottom > num_classes {
            return Err(Error::invalid(format!(
                "top {} + bottom {} exceeds {num_classes} classes",
                self.top, self.bottom
            )));
        }
        if rank <= self.top {
            Ok(1.0)
        } else if rank > num_classes - self.bottom {
            Ok(-1.0)
        } else {
            Ok(0.0)
        }
    }
}

impl fmt::Display for TopBottom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "topbot:i={},b={}", self.top, self.bottom)
    }
}

fn check_rank(rank: usize, num_classes: usize) -> Result<()> {
    if rank == 0 || rank > num_classes {
        return Err(Error::invalid(format!(
            "rank {rank} outside 1..={num_classes}"
        )));
    }
    Ok(())
}

type SpecParser = fn(&str) -> Result<Box<dyn CombinationFn>>;

/// Name-keyed registry of combination-function parsers.
///
/// `with_builtins` registers `poly` and `topbot`; additional strategies can
/// be registered under new names without touching the callers, which only
/// ever hold `Box<dyn CombinationFn>`.
pub struct CombinerRegistry {
    entries: Vec<(&'static str, SpecParser)>,
}

impl CombinerRegistry {
    pub fn empty() -> Self {
        CombinerRegistry {
            entries: Vec::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut reg = CombinerRegistry::empty();
        reg.register("poly", parse_polynomial);
        reg.register("topbot", parse_top_bottom);
        reg
    }

    pub fn register(&mut self, name: &'static str, parser: SpecParser) {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, parser));
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    /// Parse `name:key=value,...` into the registered strategy.
    pub fn parse(&self, spec: &str) -> Result<Box<dyn CombinationFn>> {
        let spec = spec.trim();
        let (name, args) = match spec.split_once(':') {
            Some((n, a)) => (n.trim(), a.trim()),
            None => (spec, ""),
        };
        let parser = self
            .entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, p)| *p)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown combination function {name:?} (known: {})",
                    self.names().join(", ")
                ))
            })?;
        parser(args)
    }
}

impl Default for CombinerRegistry {
    fn default() -> Self {
        CombinerRegistry::with_builtins()
    }
}

/// Parse one spec string against the built-in registry.
pub fn parse_combination(spec: &str) -> Result<Box<dyn CombinationFn>> {
    CombinerRegistry::with_builtins().parse(spec)
}

/// Split a sweep list into individual specs.
///
/// Accepts `;`-separated lists, and also plain comma lists where each new
/// spec is recognized by its `name:` prefix (the specs themselves contain
/// commas, as in `topbot:i=1,b=0,poly:eta=2`).
pub fn split_combination_list(list: &str) -> Vec<String> {
    let mut specs = Vec::new();
    for group in list.split(';') {
        let mut current = String::new();
        for token in group.split(',') {
            if token.contains(':') && !current.is_empty() {
                specs.push(current.trim().to_string());
                current = String::new();
            }
            if !current.is_empty() {
                current.push(',');
            }
            current.push_str(token);
        }
        if !current.trim().is_empty() {
            specs.push(current.trim().to_string());
        }
    }
    specs
}

fn parse_key_values(args: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for part in args.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("expected key=value, got {part:?}")))?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

fn parse_polynomial(args: &str) -> Result<Box<dyn CombinationFn>> {
    let mut degree: Option<u32> = None;
    let mut pivot = Pivot::Auto;
    for (key, value) in parse_key_values(args)? {
        match key.as_str() {
            "eta" => {
                degree = Some(value.parse().map_err(|_| {
                    Error::invalid(format!("poly eta must be a non-negative integer, got {value:?}"))
                })?);
            }
            "p" => {
                if value == "auto" {
                    pivot = Pivot::Auto;
                } else {
                    let p: f64 = value.parse().map_err(|_| {
                        Error::invalid(format!("poly p must be a number or `auto`, got {value:?}"))
                    })?;
                    pivot = Pivot::Fixed(p);
                }
            }
            other => return Err(Error::invalid(format!("unknown poly key {other:?}"))),
        }
    }
    let degree = degree.ok_or_else(|| Error::invalid("poly spec requires eta=<degree>"))?;
    Ok(Box::new(Polynomial::new(degree, pivot)))
}

fn parse_top_bottom(args: &str) -> Result<Box<dyn CombinationFn>> {
    let mut top: Option<usize> = None;
    let mut bottom: Option<usize> = None;
    for (key, value) in parse_key_values(args)? {
        let parsed = value.parse().map_err(|_| {
            Error::invalid(format!("topbot {key} must be a non-negative integer, got {value:?}"))
        })?;
        match key.as_str() {
            "i" => top = Some(parsed),
            "b" => bottom = Some(parsed),
            other => return Err(Error::invalid(format!("unknown topbot key {other:?}"))),
        }
    }
    match (top, bottom) {
        (Some(i), Some(b)) => Ok(Box::new(TopBottom::new(i, b))),
        _ => Err(Error::invalid("topbot spec requires i=<count>,b=<count>")),
    }
}
