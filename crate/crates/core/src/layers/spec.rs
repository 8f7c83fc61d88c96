use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which token-mixing module a layer uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingKind {
    HypermixerTied,
    HypermixerUntied,
    Mlpmixer,
    Gmlp,
    Fnet,
    Attention,
    SharedVector,
    Identity,
}

impl MixingKind {
    pub const ALL: [MixingKind; 8] = [
        MixingKind::HypermixerTied,
        MixingKind::HypermixerUntied,
        MixingKind::Mlpmixer,
        MixingKind::Gmlp,
        MixingKind::Fnet,
        MixingKind::Attention,
        MixingKind::SharedVector,
        MixingKind::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MixingKind::HypermixerTied => "hypermixer_tied",
            MixingKind::HypermixerUntied => "hypermixer_untied",
            MixingKind::Mlpmixer => "mlpmixer",
            MixingKind::Gmlp => "gmlp",
            MixingKind::Fnet => "fnet",
            MixingKind::Attention => "attention",
            MixingKind::SharedVector => "shared_vector",
            MixingKind::Identity => "identity",
        }
    }

    /// Kinds whose parameters are tied to a maximum sequence length.
    pub fn is_fixed_length(self) -> bool {
        matches!(self, MixingKind::Mlpmixer | MixingKind::Gmlp)
    }

    pub fn is_hypermixer(self) -> bool {
        matches!(self, MixingKind::HypermixerTied | MixingKind::HypermixerUntied)
    }
}

impl fmt::Display for MixingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MixingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = match s {
            "hypermixer" => "hypermixer_tied",
            "transformer" => "attention",
            other => other,
        };
        MixingKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Param(format!("unknown mixing kind {s:?}")))
    }
}

/// Default head count for attention; no value is given for the reference
/// experiments, so this is recorded alongside every result.
pub const DEFAULT_HEADS: usize = 4;

/// Configuration of one token-mixing module.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenMixingSpec {
    pub kind: MixingKind,
    pub d: usize,
    pub d_prime: usize,
    /// Fixed mixing length; required by (and only allowed for) fixed-length kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_max: Option<usize>,
    /// Attention heads; only read by the attention kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    /// HyperMixer only: add position vectors to the hypernetwork input.
    #[serde(default)]
    pub reinject_positions: bool,
}

impl TokenMixingSpec {
    /// Spec for `kind` with the defaults used throughout: `n_max` for
    /// fixed-length kinds and [`DEFAULT_HEADS`] for attention.
    pub fn new(kind: MixingKind, d: usize, d_prime: usize, n_max: usize) -> Self {
        TokenMixingSpec {
            kind,
            d,
            d_prime,
            n_max: kind.is_fixed_length().then_some(n_max),
            heads: (kind == MixingKind::Attention).then_some(DEFAULT_HEADS),
            reinject_positions: false,
        }
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = Some(heads);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_prime == 0 {
            return Err(Error::Param("d and d_prime must be positive".into()));
        }
        match (self.kind.is_fixed_length(), self.n_max) {
            (true, None) => {
                return Err(Error::Param(format!("{} needs n_max", self.kind)));
            }
            (false, Some(_)) => {
                return Err(Error::Param(format!("{} does not take n_max", self.kind)));
            }
            (true, Some(0)) => return Err(Error::Param("n_max must be positive".into())),
            _ => {}
        }
        if self.kind == MixingKind::Attention {
            let h = self.heads();
            if h == 0 || self.d % h != 0 {
                return Err(Error::Param(format!("{h} heads do not divide d = {}", self.d)));
            }
        }
        if self.kind == MixingKind::Gmlp && self.d_prime % 2 != 0 {
            return Err(Error::Param(
                "gmlp splits d_prime in half; it must be even".into(),
            ));
        }
        if self.reinject_positions && !self.kind.is_hypermixer() {
            return Err(Error::Param(
                "reinject_positions applies to hypermixer only".into(),
            ));
        }
        Ok(())
    }

    pub fn heads(&self) -> usize {
        self.heads.unwrap_or(DEFAULT_HEADS)
    }

    /// Analytic parameter count of the token-mixing module alone.
    pub fn count_params(&self) -> usize {
        let (d, dp) = (self.d, self.d_prime);
        let hypernet = d * dp + dp + dp * dp + dp;
        let n = self.n_max.unwrap_or(0);
        match self.kind {
            MixingKind::HypermixerTied => hypernet,
            MixingKind::HypermixerUntied => 2 * hypernet,
            MixingKind::Mlpmixer => 2 * n * dp,
            MixingKind::Gmlp => (d * dp + dp) + n * n + n + (dp / 2 * d + d),
            MixingKind::Attention => 4 * (d * d + d),
            MixingKind::SharedVector => 2 * dp,
            MixingKind::Fnet | MixingKind::Identity => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn n_max_only_for_fixed_kinds() {
        let mut s = TokenMixingSpec::new(MixingKind::Mlpmixer, 4, 6, 10);
        assert!(s.validate().is_ok());
        s.n_max = None;
        assert!(s.validate().is_err());
        let mut s = TokenMixingSpec::new(MixingKind::HypermixerTied, 4, 6, 10);
        assert_eq!(s.n_max, None);
        s.n_max = Some(3);
        assert!(s.validate().is_err());
    }

    #[test]
    fn heads_must_divide_d() {
        let s = TokenMixingSpec::new(MixingKind::Attention, 6, 6, 0).with_heads(4);
        assert!(s.validate().is_err());
        assert!(s.with_heads(3).validate().is_ok());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in MixingKind::ALL {
            assert_eq!(k.name().parse::<MixingKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
    }
}
