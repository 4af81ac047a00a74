//! Layer selections on the command line.
//!
//! `a..b` is half-open, `a:b` is inclusive, and items may be comma-separated
//! (`0,2,5..8`). Ranges pick the captured MoE layers whose global index falls
//! inside them; single indices must name a captured layer.

use crate::capture::{CaptureError, CaptureManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Item {
    One(u32),
    /// Inclusive bounds.
    Range(u32, u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec(Vec<Item>);

impl std::str::FromStr for LayerSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let num = |t: &str| {
            t.trim()
                .parse::<u32>()
                .map_err(|_| format!("bad layer index {t:?} in {s:?}"))
        };
        let mut items = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let item = if let Some((a, b)) = part.split_once("..") {
                let (a, b) = (num(a)?, num(b)?);
                if b <= a {
                    return Err(format!("empty range {part:?}"));
                }
                Item::Range(a, b - 1)
            } else if let Some((a, b)) = part.split_once(':') {
                let (a, b) = (num(a)?, num(b)?);
                if b < a {
                    return Err(format!("empty range {part:?}"));
                }
                Item::Range(a, b)
            } else {
                Item::One(num(part)?)
            };
            items.push(item);
        }
        if items.is_empty() {
            return Err("no layers given".into());
        }
        Ok(Self(items))
    }
}

impl LayerSpec {
    /// Captured layers selected by the spec, ascending and deduplicated.
    pub fn resolve(&self, manifest: &CaptureManifest) -> Result<Vec<u32>, CaptureError> {
        let mut out = Vec::new();
        for item in &self.0 {
            match *item {
                Item::One(l) => {
                    manifest.position(l)?;
                    out.push(l);
                }
                Item::Range(a, b) => out.extend(
                    manifest
                        .layer_index_map
                        .iter()
                        .copied()
                        .filter(|l| (a..=b).contains(l)),
                ),
            }
        }
        out.sort_unstable();
        out.dedup();
        if out.is_empty() {
            return Err(CaptureError::LayerOutOfRange {
                layer: match self.0[0] {
                    Item::One(l) | Item::Range(l, _) => l,
                },
                available: manifest.layer_index_map.clone(),
            });
        }
        Ok(out)
    }

    /// Inclusive `(first, last)` bounds, for band-style specs.
    pub fn bounds(&self) -> (u32, u32) {
        let lo = self.0.iter().map(|i| match *i {
            Item::One(l) | Item::Range(l, _) => l,
        });
        let hi = self.0.iter().map(|i| match *i {
            Item::One(l) | Item::Range(_, l) => l,
        });
        (lo.min().unwrap_or(0), hi.max().unwrap_or(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::{Dtype, FORMAT_VERSION};

    fn manifest(map: Vec<u32>) -> CaptureManifest {
        CaptureManifest {
            format_version: FORMAT_VERSION,
            model_name: "m".into(),
            num_layers: map.len(),
            hidden_dim: 4,
            experts_per_layer: vec![2; map.len()],
            top_k: 1,
            dtype: Dtype::F32,
            layer_index_map: map,
            token_count: 0,
            languages: vec![],
            hook_point: String::new(),
            has_router_scores: false,
            vocab_size: None,
            notes: Default::default(),
        }
    }

    #[test]
    fn range_forms() {
        let m = manifest(vec![1, 3, 5, 7]);
        let r = |s: &str| s.parse::<LayerSpec>().unwrap().resolve(&m).unwrap();
        assert_eq!(r("0..5"), vec![1, 3]);
        assert_eq!(r("0:5"), vec![1, 3, 5]);
        assert_eq!(r("7,1,3..4"), vec![1, 3, 7]);
    }

    #[test]
    fn bad_specs() {
        assert!("".parse::<LayerSpec>().is_err());
        assert!("3..3".parse::<LayerSpec>().is_err());
        assert!("x".parse::<LayerSpec>().is_err());
        let m = manifest(vec![1, 3]);
        assert!(matches!(
            "2".parse::<LayerSpec>().unwrap().resolve(&m),
            Err(CaptureError::LayerOutOfRange { layer: 2, .. })
        ));
        assert!("8:9".parse::<LayerSpec>().unwrap().resolve(&m).is_err());
    }

    #[test]
    fn bounds() {
        assert_eq!("8:16".parse::<LayerSpec>().unwrap().bounds(), (8, 16));
        assert_eq!("0..4".parse::<LayerSpec>().unwrap().bounds(), (0, 3));
    }
}
