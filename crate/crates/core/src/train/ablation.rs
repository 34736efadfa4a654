use std::fmt::Write as _;

use super::{evaluate, train, TrainConfig};
use crate::data::PassiveDataset;
use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::model::ModelKind;

/// Config overrides applied on top of a shared base config.
///
/// Grammar: `kind[:key=value]*` or `key=value[:key=value]*`, e.g.
/// `monolithic`, `multilinear:d=32`, `alpha=0.5`. The word `d-sweep` expands
/// to multilinear runs at `d ∈ {4, 32, 256}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Variant {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

impl Variant {
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if spec.is_empty() {
            return Err(Error::config("empty variant"));
        }
        let mut overrides = Vec::new();
        for (i, token) in spec.split(':').enumerate() {
            match token.split_once('=') {
                Some((k, v)) => overrides.push((k.trim().to_string(), v.trim().to_string())),
                None if i == 0 => {
                    let kind: ModelKind = token.trim().parse()?;
                    overrides.push(("model_kind".to_string(), kind.name().to_string()));
                }
                None => return Err(Error::config(format!("bad variant token `{token}` in `{spec}`"))),
            }
        }
        let variant = Self {
            label: spec.to_string(),
            overrides,
        };
        variant.apply(&TrainConfig::default())?;
        Ok(variant)
    }

    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub const D_SWEEP: [usize; 3] = [4, 32, 256];

/// Comma-separated variant specs.
pub fn parse_variants(text: &str) -> Result<Vec<Variant>> {
    let mut out = Vec::new();
    for spec in text.split(',') {
        if spec.trim() == "d-sweep" {
            for d in D_SWEEP {
                out.push(Variant::parse(&format!("multilinear:d={d}"))?);
            }
        } else {
            out.push(Variant::parse(spec)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub kind: ModelKind,
    pub d: usize,
    pub sup_icvf_err: f64,
    pub icvf_fit_mse: f64,
    pub self_value_err: f64,
    pub probe_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_CSV_HEADER: &str = "variant,kind,d,sup_icvf_err,icvf_fit_mse,self_value_err,probe_mse";

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(ABLATION_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.variant, r.kind, r.d, r.sup_icvf_err, r.icvf_fit_mse, r.self_value_err, r.probe_mse
            )
            .expect("write to string");
        }
        out
    }

    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Whether the monolithic baseline fits the ICVF at least as well as the
    /// multilinear model while probing no better.
    pub fn directional_note(&self) -> String {
        let (Some(multi), Some(mono)) = (
            self.rows.iter().find(|r| r.kind == ModelKind::Multilinear),
            self.rows.iter().find(|r| r.kind == ModelKind::Monolithic),
        ) else {
            return "directional: not applicable (needs a multilinear and a monolithic row)".to_string();
        };
        let fits = mono.icvf_fit_mse <= multi.icvf_fit_mse;
        let probes = mono.probe_mse >= multi.probe_mse;
        format!(
            "directional: monolithic fit_mse {:.6e} vs multilinear {:.6e} ({}); monolithic probe_mse {:.6e} vs multilinear {:.6e} ({}); expectation {}",
            mono.icvf_fit_mse,
            multi.icvf_fit_mse,
            if fits { "fits <=" } else { "fits worse" },
            mono.probe_mse,
            multi.probe_mse,
            if probes { "probes >=" } else { "probes better" },
            if fits && probes { "met" } else { "not met" },
        )
    }
}

/// Trains every variant on the same data and seed and tabulates final metrics.
pub fn run_ablation(
    dataset: &PassiveDataset,
    mdp: &TabularMdp,
    base_cfg: &TrainConfig,
    variants: &[Variant],
) -> Result<AblationTable> {
    if variants.is_empty() {
        return Err(Error::config("at least one ablation variant is required"));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let cfg = variant.apply(base_cfg)?;
        let run = train(dataset, mdp, &cfg)?;
        let eval = evaluate(&run.model, &run.oracle)?;
        rows.push(AblationRow {
            variant: variant.label.clone(),
            kind: run.model.kind(),
            d: cfg.d,
            sup_icvf_err: eval.sup_icvf_err,
            icvf_fit_mse: eval.icvf_fit_mse,
            self_value_err: eval.self_value_err,
            probe_mse: eval.probe_mse,
        });
    }
    Ok(AblationTable { rows })
}
