use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Bounds, EnvSpec};
use crate::error::{Error, Result};

/// `variant = scale · base + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub scale: f64,
    pub offset: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { scale: 1.0, offset: 0.0 };

    fn forward(&self, v: f64) -> f64 {
        self.scale * v + self.offset
    }

    fn inverse(&self, v: f64) -> f64 {
        (v - self.offset) / self.scale
    }

    fn bounds(&self, b: &Bounds) -> Bounds {
        let (p, q) = (self.forward(b.lower), self.forward(b.upper));
        Bounds { lower: p.min(q), upper: p.max(q) }
    }
}

/// How appended observation coordinates are filled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PadFill {
    /// Always `value`; declared bounds `[value − 1, value + 1]`.
    Constant(f64),
    /// Independent uniform draws on `[−1, 1]` every step.
    Noise,
}

impl PadFill {
    pub fn bounds(&self) -> Bounds {
        match *self {
            PadFill::Constant(c) => Bounds { lower: c - 1.0, upper: c + 1.0 },
            PadFill::Noise => Bounds { lower: -1.0, upper: 1.0 },
        }
    }
}

/// A change of representation applied on top of a base task.
///
/// Variant state coordinate `i < n` is `state_affine[i]` applied to base
/// coordinate `state_perm[i]`; `state_pad` extra coordinates follow. Variant
/// action coordinate `i < m` maps back to base action coordinate
/// `action_perm[i]` through the inverse of `action_affine[i]`; `action_pad`
/// trailing action coordinates are accepted and ignored. Empty permutation
/// or affine lists mean identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct DomainTransform {
    pub state_perm: Vec<usize>,
    pub state_affine: Vec<Affine>,
    pub state_pad: usize,
    pub state_pad_fill: Option<PadFill>,
    pub action_perm: Vec<usize>,
    pub action_affine: Vec<Affine>,
    pub action_pad: usize,
}

fn is_permutation(p: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    p.len() == n
        && p.iter().all(|&i| {
            if i >= n || seen[i] {
                false
            } else {
                seen[i] = true;
                true
            }
        })
}

impl DomainTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        let perm_id = |p: &[usize]| p.iter().enumerate().all(|(i, &j)| i == j);
        let aff_id = |a: &[Affine]| a.iter().all(|x| *x == Affine::IDENTITY);
        perm_id(&self.state_perm)
            && perm_id(&self.action_perm)
            && aff_id(&self.state_affine)
            && aff_id(&self.action_affine)
            && self.state_pad == 0
            && self.action_pad == 0
    }

    pub fn pad_fill(&self) -> PadFill {
        self.state_pad_fill.unwrap_or(PadFill::Noise)
    }

    /// Checks the transform against base dimensions.
    pub fn validate(&self, state_dim: usize, action_dim: usize) -> Result<()> {
        let check = |perm: &[usize], aff: &[Affine], n: usize, what: &str| -> Result<()> {
            if !perm.is_empty() && !is_permutation(perm, n) {
                return Err(Error::invalid(format!("{what} permutation {perm:?} is not a permutation of 0..{n}")));
            }
            if !aff.is_empty() && aff.len() != n {
                return Err(Error::invalid(format!(
                    "{what} affine list has {} entries for {n} coordinates",
                    aff.len()
                )));
            }
            if let Some(bad) = aff.iter().find(|a| !(a.scale != 0.0 && a.scale.is_finite() && a.offset.is_finite())) {
                return Err(Error::invalid(format!("{what} affine {bad:?} is not invertible")));
            }
            Ok(())
        };
        check(&self.state_perm, &self.state_affine, state_dim, "state")?;
        check(&self.action_perm, &self.action_affine, action_dim, "action")?;
        if self.state_pad_fill.is_some() && self.state_pad == 0 {
            return Err(Error::invalid("a pad fill rule was given without pad dims"));
        }
        Ok(())
    }

    fn perm(p: &[usize], i: usize) -> usize {
        if p.is_empty() {
            i
        } else {
            p[i]
        }
    }

    fn affine(a: &[Affine], i: usize) -> Affine {
        if a.is_empty() {
            Affine::IDENTITY
        } else {
            a[i]
        }
    }

    /// Variant observation of a base state, with `pads` appended.
    pub fn state_from_base(&self, base: &[f64], pads: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = (0..base.len())
            .map(|i| Self::affine(&self.state_affine, i).forward(base[Self::perm(&self.state_perm, i)]))
            .collect();
        out.extend_from_slice(pads);
        out
    }

    /// Inverse of [`Self::state_from_base`] on the non-padded coordinates.
    pub fn state_to_base(&self, variant: &[f64], base_dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; base_dim];
        for (i, v) in variant.iter().take(base_dim).enumerate() {
            out[Self::perm(&self.state_perm, i)] = Self::affine(&self.state_affine, i).inverse(*v);
        }
        out
    }

    pub fn action_to_base(&self, variant: &[f64], base_dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; base_dim];
        for (i, v) in variant.iter().take(base_dim).enumerate() {
            out[Self::perm(&self.action_perm, i)] = Self::affine(&self.action_affine, i).inverse(*v);
        }
        out
    }

    /// Variant action that maps to `base`; pad coordinates are zero.
    pub fn action_from_base(&self, base: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = (0..base.len())
            .map(|i| Self::affine(&self.action_affine, i).forward(base[Self::perm(&self.action_perm, i)]))
            .collect();
        out.extend(std::iter::repeat_n(0.0, self.action_pad));
        out
    }

    /// Bounds of the variant spaces.
    pub fn apply_to_spec(&self, base: &EnvSpec) -> EnvSpec {
        let n = base.state_dim();
        let m = base.action_dim();
        let mut state_bounds: Vec<Bounds> = (0..n)
            .map(|i| Self::affine(&self.state_affine, i).bounds(&base.state_bounds[Self::perm(&self.state_perm, i)]))
            .collect();
        state_bounds.extend(std::iter::repeat_n(self.pad_fill().bounds(), self.state_pad));
        let mut action_bounds: Vec<Bounds> = (0..m)
            .map(|i| Self::affine(&self.action_affine, i).bounds(&base.action_bounds[Self::perm(&self.action_perm, i)]))
            .collect();
        action_bounds.extend(std::iter::repeat_n(Bounds { lower: -1.0, upper: 1.0 }, self.action_pad));
        EnvSpec {
            state_bounds,
            action_bounds,
            reward_bounds: base.reward_bounds,
            max_episode_steps: base.max_episode_steps,
        }
    }

    /// Serializes to the `key:value` segments used after `@` in an env id.
    pub fn to_id_suffix(&self) -> String {
        let mut out = String::new();
        let join_usize = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let join_aff =
            |v: &[Affine]| v.iter().map(|a| format!("{}/{}", a.scale, a.offset)).collect::<Vec<_>>().join(",");
        let mut push = |k: &str, v: String| {
            if !out.is_empty() {
                out.push(':');
            }
            let _ = write!(out, "{k}:{v}");
        };
        if !self.state_perm.is_empty() {
            push("perm", join_usize(&self.state_perm));
        }
        if !self.state_affine.is_empty() {
            push("affine", join_aff(&self.state_affine));
        }
        if self.state_pad > 0 {
            let fill = match self.pad_fill() {
                PadFill::Noise => "noise".to_string(),
                PadFill::Constant(c) => format!("const/{c}"),
            };
            push("pad", format!("{}/{fill}", self.state_pad));
        }
        if !self.action_perm.is_empty() {
            push("aperm", join_usize(&self.action_perm));
        }
        if !self.action_affine.is_empty() {
            push("aaffine", join_aff(&self.action_affine));
        }
        if self.action_pad > 0 {
            push("apad", self.action_pad.to_string());
        }
        out
    }

    pub fn parse_id_suffix(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::invalid(format!("bad transform `{text}`: {msg}"));
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() % 2 != 0 {
            return Err(bad("expected key:value pairs".into()));
        }
        let parse_f = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
        let parse_u = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("`{s}`: {e}")));
        let parse_aff = |s: &str| -> Result<Vec<Affine>> {
            s.split(',')
                .map(|item| {
                    let (sc, off) =
                        item.split_once('/').ok_or_else(|| bad(format!("affine entry `{item}` needs scale/offset")))?;
                    Ok(Affine { scale: parse_f(sc)?, offset: parse_f(off)? })
                })
                .collect()
        };
        let mut t = DomainTransform::default();
        for kv in parts.chunks(2) {
            let (key, value) = (kv[0], kv[1]);
            match key {
                "perm" => t.state_perm = value.split(',').map(parse_u).collect::<Result<_>>()?,
                "aperm" => t.action_perm = value.split(',').map(parse_u).collect::<Result<_>>()?,
                "affine" => t.state_affine = parse_aff(value)?,
                "aaffine" => t.action_affine = parse_aff(value)?,
                "apad" => t.action_pad = parse_u(value)?,
                "pad" => {
                    let mut it = value.split('/');
                    t.state_pad = parse_u(it.next().unwrap_or(""))?;
                    t.state_pad_fill = match (it.next(), it.next()) {
                        (None, _) | (Some("noise"), None) => Some(PadFill::Noise),
                        (Some("const"), Some(c)) => Some(PadFill::Constant(parse_f(c)?)),
                        (other, _) => return Err(bad(format!("unknown pad fill {other:?}"))),
                    };
                    if t.state_pad == 0 {
                        t.state_pad_fill = None;
                    }
                }
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        Ok(t)
    }
}
