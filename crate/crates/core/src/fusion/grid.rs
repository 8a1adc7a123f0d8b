use crate::error::{Error, Result};

use super::config::{FusionKind, ModelConfig, VisualEncoderKind};

/// One named cell of the ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: &'static str,
    pub config: ModelConfig,
}

const GRID: [(&str, FusionKind, VisualEncoderKind, bool); 8] = [
    ("Ours", FusionKind::Hybrid, VisualEncoderKind::Frame2dRnn, true),
    ("Ours1", FusionKind::Later, VisualEncoderKind::Clip3d, true),
    ("Ours2", FusionKind::Early, VisualEncoderKind::Clip3d, true),
    ("Ours3", FusionKind::Hierarchical, VisualEncoderKind::Clip3d, true),
    ("Ours4", FusionKind::Later, VisualEncoderKind::Frame2dRnn, false),
    ("Ours5", FusionKind::Later, VisualEncoderKind::Frame2dRnn, true),
    ("Ours6", FusionKind::Early, VisualEncoderKind::Frame2dRnn, true),
    ("Ours7", FusionKind::Hierarchical, VisualEncoderKind::Frame2dRnn, true),
];

/// The eight ablation variants at full scale.
pub fn variant_grid() -> Vec<Variant> {
    variant_grid_from(&ModelConfig::default())
}

/// The eight ablation variants, taking dimensions and input kind from `base`.
pub fn variant_grid_from(base: &ModelConfig) -> Vec<Variant> {
    GRID.iter()
        .map(|&(name, fusion, visual_encoder, use_global_context)| Variant {
            name,
            config: ModelConfig {
                fusion,
                visual_encoder,
                use_global_context,
                ..base.clone()
            },
        })
        .collect()
}

/// Looks up a variant by name, case-insensitively.
pub fn resolve_variant(name: &str, base: &ModelConfig) -> Result<Variant> {
    variant_grid_from(base)
        .into_iter()
        .find(|v| v.name.eq_ignore_ascii_case(name))
        .ok_or_else(|| {
            let known: Vec<&str> = GRID.iter().map(|g| g.0).collect();
            Error::Config(format!(
                "unknown variant {name:?}; expected one of {}",
                known.join(", ")
            ))
        })
}

pub fn variant_names() -> Vec<&'static str> {
    GRID.iter().map(|g| g.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_matches_table_rows() {
        let grid = variant_grid();
        assert_eq!(grid.len(), 8);
        let mut names: Vec<_> = grid.iter().map(|v| v.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 8);

        let ours4 = resolve_variant("Ours4", &ModelConfig::default()).unwrap();
        assert!(!ours4.config.use_global_context);
        assert_eq!(ours4.config.fusion, FusionKind::Later);
        let ours1 = resolve_variant("ours1", &ModelConfig::default()).unwrap();
        assert_eq!(ours1.config.visual_encoder, VisualEncoderKind::Clip3d);
        assert!(grid.iter().filter(|v| v.name != "Ours4").all(|v| v.config.use_global_context));
        assert!(resolve_variant("Ours8", &ModelConfig::default()).is_err());
    }

    #[test]
    fn grid_keeps_base_dimensions() {
        let base = ModelConfig::desk();
        for v in variant_grid_from(&base) {
            assert_eq!(v.config.hidden_dim, base.hidden_dim);
            assert_eq!(v.config.feature_dim, base.feature_dim);
            v.config.validate().unwrap();
        }
    }
}
