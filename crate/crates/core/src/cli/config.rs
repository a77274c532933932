//! Experiment configuration files (TOML or JSON) and their resolution into
//! runnable pieces.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::codec::CodecSpec;
use crate::netsim::Topology;
use crate::parallel3d::{CommPath, ParallelLayout, SchemeTable};
use crate::toymodel::optim::GradientExchange;
use crate::toymodel::{ToyModelConfig, TrainError};

/// Environment variable naming a built-in topology preset.
pub const PRESET_ENV: &str = "HYBRIDCOMM_PRESET";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologySection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_nodes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gpus_per_node: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intra_bw: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inter_bw: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intra_lat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inter_lat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub codec_bw: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compute_flops: Option<f64>,
}

impl TopologySection {
    /// Starts from `preset` (or `env_preset`, or lassen-like) and applies
    /// any explicit overrides.
    pub fn resolve(&self, env_preset: Option<&str>) -> Result<Topology, CliError> {
        let name = self.preset.as_deref().or(env_preset).unwrap_or("lassen-like");
        let mut t = Topology::preset(name).map_err(|e| CliError::invalid("topology.preset", e.to_string()))?;
        macro_rules! apply {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { t.$f = v; } )* };
        }
        apply!(num_nodes, gpus_per_node, intra_bw, inter_bw, intra_lat, inter_lat, codec_bw, compute_flops);
        t.validate().map_err(|e| CliError::invalid("topology", e.to_string()))?;
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutSection {
    pub dp: usize,
    pub pp: usize,
    pub tp: usize,
    pub zero1: bool,
    /// Gradient exchange under ZeRO-1; ignored when `zero1` is off.
    pub zero1_gradients: GradientExchange,
}

impl Default for LayoutSection {
    fn default() -> Self {
        Self {
            dp: 1,
            pp: 1,
            tp: 1,
            zero1: false,
            zero1_gradients: GradientExchange::ReduceScatter,
        }
    }
}

/// A named scheme, optionally with rates, or an explicit per-path table.
///
/// ```toml
/// [scheme]
/// name = "z-hybrid"
/// mp_rate = 24
/// dp_rate = 8
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeSection {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mp_rate: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dp_rate: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paths: Option<BTreeMap<CommPath, CodecSpec>>,
}

impl Default for SchemeSection {
    fn default() -> Self {
        Self {
            name: "no-compression".into(),
            mp_rate: None,
            dp_rate: None,
            paths: None,
        }
    }
}

impl SchemeSection {
    pub fn resolve(&self) -> Result<SchemeTable, CliError> {
        let err = |e: crate::parallel3d::SchemeError| CliError::invalid("scheme", e.to_string());
        if let Some(paths) = &self.paths {
            if self.mp_rate.is_some() || self.dp_rate.is_some() {
                return Err(CliError::invalid("scheme.paths", "cannot be combined with mp_rate/dp_rate"));
            }
            return SchemeTable::new(self.name.clone(), paths.clone()).map_err(err);
        }
        match (self.name.as_str(), self.mp_rate, self.dp_rate) {
            ("z-hybrid", mp, dp) => SchemeTable::z_hybrid(mp.unwrap_or(crate::parallel3d::DEFAULT_HIGH_RATE), dp.unwrap_or(crate::parallel3d::DEFAULT_LOW_RATE)).map_err(err),
            ("mz-hybrid", None, dp) => SchemeTable::mz_hybrid(dp.unwrap_or(crate::parallel3d::DEFAULT_LOW_RATE)).map_err(err),
            (name, None, None) => SchemeTable::by_name(name).map_err(err),
            (name, _, _) => Err(CliError::invalid("scheme", format!("`{name}` does not take rates"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Scheme names as accepted by [`SchemeTable::by_name`]; empty means the
    /// `[scheme]` section alone.
    pub schemes: Vec<String>,
    /// World sizes to scale data parallelism over; empty means the layout's.
    pub world_sizes: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub topology: TopologySection,
    pub layout: LayoutSection,
    pub model: ToyModelConfig,
    pub scheme: SchemeSection,
    pub output: OutputSection,
    /// Seeds to run; empty means `model.seed`.
    pub seeds: Vec<u64>,
    pub sweep: SweepSection,
}

/// A fully checked experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub topology: Topology,
    pub layout: ParallelLayout,
    pub model: ToyModelConfig,
    pub scheme: SchemeTable,
    pub zero1: Option<GradientExchange>,
    pub seeds: Vec<u64>,
}

impl Experiment {
    /// The model config for one seed.
    pub fn model_for(&self, seed: u64) -> ToyModelConfig {
        ToyModelConfig {
            seed,
            ..self.model.clone()
        }
    }

    /// The same experiment with data parallelism scaled to `world` ranks,
    /// keeping `pp`, `tp` and the per-replica batch fixed.
    pub fn scaled_to(&self, world: usize) -> Result<Experiment, CliError> {
        let field = "sweep.world_sizes";
        let gpn = self.topology.gpus_per_node;
        let mp = self.layout.pp * self.layout.tp;
        if world == 0 || !world.is_multiple_of(gpn) {
            return Err(CliError::invalid(field, format!("{world} is not a multiple of {gpn} GPUs per node")));
        }
        if !world.is_multiple_of(mp) {
            return Err(CliError::invalid(field, format!("{world} is not a multiple of pp x tp = {mp}")));
        }
        let topology = self.topology.clone().with_nodes(world / gpn);
        let dp = world / mp;
        let layout = ParallelLayout::build(dp, self.layout.pp, self.layout.tp, &topology).map_err(|e| CliError::invalid(field, e.to_string()))?;
        let model = ToyModelConfig {
            batch_size: self.model.batch_size / self.layout.dp * dp,
            ..self.model.clone()
        };
        model.validate(&layout).map_err(model_error)?;
        Ok(Experiment {
            topology,
            layout,
            model,
            scheme: self.scheme.clone(),
            zero1: self.zero1,
            seeds: self.seeds.clone(),
        })
    }
}

fn model_error(e: TrainError) -> CliError {
    match e {
        TrainError::InvalidConfig { field, reason } => CliError::invalid(format!("model.{field}"), reason),
        other => CliError::invalid("model", other.to_string()),
    }
}

impl ExperimentConfig {
    /// Reads TOML, or JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let parse_err = |message: String| CliError::Parse {
            path: path.to_path_buf(),
            message,
        };
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| parse_err(e.to_string()))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes to JSON")
    }

    /// Resolves using the preset named by [`PRESET_ENV`], if set.
    pub fn resolve(&self) -> Result<Experiment, CliError> {
        let env = std::env::var(PRESET_ENV).ok();
        self.resolve_with(env.as_deref())
    }

    pub fn resolve_with(&self, env_preset: Option<&str>) -> Result<Experiment, CliError> {
        let topology = self.topology.resolve(env_preset)?;
        let l = &self.layout;
        let layout = ParallelLayout::build(l.dp, l.pp, l.tp, &topology).map_err(|e| CliError::invalid("layout", e.to_string()))?;
        self.model.validate(&layout).map_err(model_error)?;
        let scheme = self.scheme.resolve()?;
        for name in &self.sweep.schemes {
            SchemeTable::by_name(name).map_err(|e| CliError::invalid("sweep.schemes", e.to_string()))?;
        }
        let seeds = if self.seeds.is_empty() { vec![self.model.seed] } else { self.seeds.clone() };
        let exp = Experiment {
            topology,
            layout,
            model: self.model.clone(),
            scheme,
            zero1: l.zero1.then_some(l.zero1_gradients),
            seeds,
        };
        for &w in &self.sweep.world_sizes {
            exp.scaled_to(w)?;
        }
        Ok(exp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seeds = [1, 2]

[topology]
preset = "desk-2x2"

[layout]
dp = 2
pp = 1
tp = 2

[model]
steps = 5
hidden_dim = 32

[scheme]
name = "z-hybrid"
mp_rate = 24
dp_rate = 8
"#;

    #[test]
    fn parses_and_resolves() {
        let cfg: ExperimentConfig = toml::from_str(SAMPLE).unwrap();
        let exp = cfg.resolve_with(None).unwrap();
        assert_eq!(exp.scheme.name(), "z-hybrid-24-8");
        assert_eq!(exp.layout.world_size(), 4);
        assert_eq!(exp.seeds, vec![1, 2]);
        assert_eq!(exp.zero1, None);
    }

    #[test]
    fn env_preset_applies_only_without_explicit_preset() {
        let cfg = ExperimentConfig {
            layout: LayoutSection { dp: 2, pp: 1, tp: 2, ..Default::default() },
            ..Default::default()
        };
        assert_eq!(cfg.resolve_with(Some("desk-2x2")).unwrap().topology, Topology::desk_2x2());
        let err = cfg.resolve_with(None).unwrap_err();
        assert!(matches!(err, CliError::Invalid { ref field, .. } if field == "layout"), "{err}");
    }

    #[test]
    fn errors_name_the_field() {
        let mut cfg: ExperimentConfig = toml::from_str(SAMPLE).unwrap();
        cfg.model.hidden_dim = 33;
        let err = cfg.resolve_with(None).unwrap_err();
        assert!(err.to_string().contains("model.hidden_dim"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn explicit_paths() {
        let text = r#"
[topology]
preset = "desk-2x2"
[layout]
dp = 4
[scheme]
name = "custom"
[scheme.paths]
dp-allreduce = "zfp:12"
pp-p2p = "none"
tp-allreduce = "none"
tp-allgather = "none"
zero1-allgather = "mpc"
zero1-reduce-scatter = "zfp:12"
"#;
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        let s = cfg.resolve_with(None).unwrap().scheme;
        assert_eq!(s.codec(CommPath::DpAllreduce), CodecSpec::FixedRate(12));
        assert_eq!(s.codec(CommPath::Zero1Allgather), CodecSpec::Lossless);
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn world_size_scaling_keeps_per_replica_batch() {
        let cfg: ExperimentConfig = toml::from_str(SAMPLE).unwrap();
        let exp = cfg.resolve_with(None).unwrap();
        let big = exp.scaled_to(8).unwrap();
        assert_eq!(big.layout.dp, 4);
        assert_eq!(big.model.batch_size, exp.model.batch_size * 2);
        assert!(exp.scaled_to(3).is_err());
    }
}
