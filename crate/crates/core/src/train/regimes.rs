use super::{train, ForecastData, TrainConfig, TrainMode, TrainReport};
use crate::dataio::Split;
use crate::error::{Error, Result};
use crate::evalcli::{evaluate, EvalOptions, MetricsReport};
use crate::model::{CountFilter, ForecastModel, ParamRole};
use crate::peft::{attach, evolutionary_search, AdapterSpec, AttachOptions, LayerSpace, SearchResult, SearchSpace};

/// A fine-tuned model with its run record.
#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub model: ForecastModel,
    pub report: TrainReport,
    pub trainable_params: usize,
    pub adapted_paths: Vec<String>,
    pub search: Option<SearchResult>,
}

fn check_compatible(base: &ForecastModel, data: &ForecastData) -> Result<()> {
    let cfg = base.config();
    if data.dataset.grid() != &cfg.grid || data.inputs != cfg.input_variables || data.targets != cfg.target_variables {
        return Err(Error::Train(
            "regional data was not prepared for this base model (grid or variables differ)".into(),
        ));
    }
    Ok(())
}

fn adapter_options(cfg: &TrainConfig) -> AttachOptions {
    AttachOptions {
        train_head: cfg.peft.train_head,
        seed: cfg.seed,
    }
}

/// Searches GLoRA structures for the configured targets; each candidate is
/// attached to a copy of `base`, trained for `search_steps` steps and scored
/// by validation loss.
pub fn glora_search(base: &ForecastModel, data: &ForecastData, cfg: &TrainConfig) -> Result<SearchResult> {
    check_compatible(base, data)?;
    let mut layers = Vec::new();
    for path in cfg.peft.targets.paths(base.config()) {
        let w = base.params().value(&format!("{path}.weight"))?;
        let rank = cfg.peft.rank.min(w.shape()[0]).min(w.shape()[1]);
        layers.push(LayerSpace::standard(path.clone(), rank, base.params().contains(&format!("{path}.bias"))));
    }
    let space = SearchSpace::new(layers)?;
    let short = TrainConfig {
        max_epochs: 1,
        patience: 1,
        steps_per_epoch: Some(cfg.peft.search_steps.max(1)),
        max_val_windows: Some(cfg.peft.search_val_windows.max(1)),
        ..cfg.clone()
    };
    let search_cfg = crate::peft::SearchConfig {
        seed: cfg.peft.search.seed ^ cfg.seed,
        ..cfg.peft.search.clone()
    };
    evolutionary_search(&space, &search_cfg, |tags| {
        let mut m = base.clone();
        attach(&mut m, &AdapterSpec::Glora { tags: tags.to_vec() }, &cfg.peft.targets, &adapter_options(cfg))?;
        Ok(train(&mut m, data, &short)?.best_val_loss)
    })
}

/// Fine-tunes a copy of `base` on `data` in the configured mode.
pub fn finetune_regional(base: &ForecastModel, data: &ForecastData, cfg: &TrainConfig) -> Result<FinetuneResult> {
    check_compatible(base, data)?;
    let mut model = base.clone();
    let mut search = None;
    let adapted_paths = match cfg.mode {
        TrainMode::Fft => {
            model.params_mut().set_trainable_where(|_, p| p.role == ParamRole::Base);
            Vec::new()
        }
        TrainMode::Lora | TrainMode::Reslora => {
            let spec = if cfg.mode == TrainMode::Lora {
                AdapterSpec::Lora { rank: cfg.peft.rank, alpha: cfg.peft.alpha }
            } else {
                AdapterSpec::ResLora { rank: cfg.peft.rank, alpha: cfg.peft.alpha }
            };
            attach(&mut model, &spec, &cfg.peft.targets, &adapter_options(cfg))?
        }
        TrainMode::Glora => {
            let tags = match &cfg.peft.glora_tags {
                Some(t) => t.clone(),
                None => {
                    let r = glora_search(base, data, cfg)?;
                    let best = r.best.layers.clone();
                    search = Some(r);
                    best
                }
            };
            attach(&mut model, &AdapterSpec::Glora { tags }, &cfg.peft.targets, &adapter_options(cfg))?
        }
    };
    let trainable_params = model.count_parameters(CountFilter::Trainable);
    let report = train(&mut model, data, cfg)?;
    Ok(FinetuneResult {
        model,
        report,
        trainable_params,
        adapted_paths,
        search,
    })
}

#[derive(Clone, Debug)]
pub struct LeadSuiteEntry {
    pub lead_hours: u32,
    pub model: ForecastModel,
    pub report: TrainReport,
    pub metrics: MetricsReport,
}

/// Specialists keyed by lead time, in the order given.
#[derive(Clone, Debug)]
pub struct LeadSuite {
    pub entries: Vec<LeadSuiteEntry>,
}

impl LeadSuite {
    pub fn get(&self, lead: u32) -> Option<&LeadSuiteEntry> {
        self.entries.iter().find(|e| e.lead_hours == lead)
    }

    pub fn leads(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.lead_hours).collect()
    }
}

/// One fine-tuned specialist per lead, each evaluated on the test split of
/// its own lead.
pub fn lead_time_suite(base: &ForecastModel, data: &ForecastData, leads: &[u32], cfg: &TrainConfig, eval: &EvalOptions) -> Result<LeadSuite> {
    if leads.is_empty() {
        return Err(Error::Train("lead-time suite needs at least one lead".into()));
    }
    for &lead in leads {
        for split in [Split::Train, Split::Val, Split::Test] {
            if data.windows(split, &[lead]).is_empty() {
                return Err(Error::Train(format!("insufficient windows for lead {lead}h in the {split} split")));
            }
        }
    }
    let mut entries = Vec::with_capacity(leads.len());
    for &lead in leads {
        let c = TrainConfig {
            lead_times: vec![lead],
            ..cfg.clone()
        };
        let r = finetune_regional(base, data, &c)?;
        let metrics = evaluate(&r.model, data, data.region.as_ref(), &[lead], eval)?;
        entries.push(LeadSuiteEntry {
            lead_hours: lead,
            model: r.model,
            report: r.report,
            metrics,
        });
    }
    Ok(LeadSuite { entries })
}
