//! The operations behind the `vusfa` binary: train, eval, finetune, ablate,
//! verify. Each command resolves a [`RunConfig`], echoes it into the output
//! directory for provenance, runs the corresponding library pipeline and
//! writes its artifacts as CSV/checkpoint files.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::eval::{
    self, finetune, random_baseline, zero_shot, CurveSeries, EvalError, EvalPolicy, SuccessTable,
};
use crate::grid::{self, GoalSpec, GridError, World};
use crate::model::{Model, ModelConfig, ModelError, Variant};
use crate::trainer::{self, CheckpointSink, InitState, TrainError};
use crate::verify::{self, VerifyFlags};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("no output directory: pass --out, set `out` in the config, or set $VUSFA_OUT_DIR")]
    MissingOutDir,
    #[error("this command needs --checkpoint (or `checkpoint` in the config)")]
    MissingCheckpoint,
    #[error("checkpoint does not fit the scene set: {0}")]
    CheckpointMismatch(String),
}

/// Load the manifest world or the built-in default.
pub fn load_world(cfg: &RunConfig) -> Result<World, CommandError> {
    match &cfg.scenes {
        Some(path) => Ok(grid::load_manifest(path)?),
        None => Ok(grid::default_world()),
    }
}

fn model_config_for(cfg: &RunConfig, world: &World, variant: Variant) -> ModelConfig {
    let mut mc = ModelConfig::new(variant, world.scenes.obs_dim(), world.scenes.len());
    mc.embed_dim = cfg.embed_dim;
    mc.hidden_dim = cfg.hidden_dim;
    mc.enc_hidden = cfg.enc_hidden;
    mc
}

/// Create the output directory and echo the resolved config into it.
pub fn prepare_out_dir(cfg: &RunConfig) -> Result<PathBuf, CommandError> {
    let dir = cfg.resolved_out_dir().ok_or(CommandError::MissingOutDir)?;
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("resolved.cfg"), cfg.to_text())?;
    Ok(dir)
}

pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub steps: u64,
    pub episodes: usize,
    pub discarded_segments: u64,
}

/// Train one variant and write checkpoint + training log.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary, CommandError> {
    let out_dir = prepare_out_dir(cfg)?;
    let world = load_world(cfg)?;
    let model = Model::new(model_config_for(cfg, &world, cfg.variant));

    let init = match &cfg.checkpoint {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            Some(InitState {
                params: ckpt.params,
                opt_sq: Some(ckpt.opt_sq),
            })
        }
        None => None,
    };

    let sink = CheckpointSink {
        dir: &out_dir,
        model_cfg_text: model.config().to_kv_text(),
    };
    let out = trainer::train(
        &model,
        &cfg.hyper,
        &world,
        &cfg.env,
        cfg.base_seed,
        cfg.strict,
        init,
        Some(sink),
    )?;

    let ckpt_path = out_dir.join("checkpoint_final.ckpt");
    checkpoint::save(&ckpt_path, &out.params, &out.opt_sq, out.steps)?;
    std::fs::write(
        ckpt_path.with_extension("cfg"),
        model.config().to_kv_text(),
    )?;
    let mut log = out.log;
    trainer::sort_log(&mut log);
    trainer::write_train_log(&out_dir.join("train_log.csv"), &log)?;

    Ok(TrainSummary {
        out_dir,
        checkpoint: ckpt_path,
        steps: out.steps,
        episodes: log.len(),
        discarded_segments: out.discarded_segments,
    })
}

/// Load a checkpoint plus its sidecar model config, and check both against
/// the world.
pub fn load_checkpoint_model(
    path: &Path,
    world: &World,
) -> Result<(Model, crate::tensor::ParamSet, Vec<crate::tensor::Tensor>), CommandError> {
    let ckpt = checkpoint::load(path)?;
    let sidecar = path.with_extension("cfg");
    let text = std::fs::read_to_string(&sidecar).map_err(|e| {
        CommandError::CheckpointMismatch(format!(
            "missing model config sidecar {}: {e}",
            sidecar.display()
        ))
    })?;
    let mc = ModelConfig::from_kv_text(&text)?;
    if mc.obs_dim != world.scenes.obs_dim() || mc.num_scenes != world.scenes.len() {
        return Err(CommandError::CheckpointMismatch(format!(
            "checkpoint was trained for obs_dim {} / {} scenes, world has {} / {}",
            mc.obs_dim,
            mc.num_scenes,
            world.scenes.obs_dim(),
            world.scenes.len()
        )));
    }
    Ok((Model::new(mc), ckpt.params, ckpt.opt_sq))
}

/// Every free cell of every scene, the goal set of the zero-shot table.
pub fn all_cell_goals(world: &World) -> Vec<GoalSpec> {
    world
        .scenes
        .scenes()
        .iter()
        .flat_map(|s| {
            s.free_cells().iter().map(move |&cell| GoalSpec {
                scene_id: s.scene_id,
                cell,
            })
        })
        .collect()
}

pub struct EvalSummary {
    pub out_dir: PathBuf,
    pub table: SuccessTable,
    pub random: SuccessTable,
    pub checkpoint_hash_before: String,
    pub checkpoint_hash_after: String,
}

/// Zero-shot evaluation of a checkpoint over every state of every scene,
/// against the random-walk floor.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalSummary, CommandError> {
    let out_dir = prepare_out_dir(cfg)?;
    let ckpt_path = cfg
        .checkpoint
        .clone()
        .ok_or(CommandError::MissingCheckpoint)?;
    let world = load_world(cfg)?;
    let (model, params, _) = load_checkpoint_model(&ckpt_path, &world)?;

    let hash_before = checkpoint::file_sha256(&ckpt_path)?;
    let goals = all_cell_goals(&world);
    let label = model.config().variant.name().to_string();
    let (table, records) = zero_shot(
        &label,
        &EvalPolicy::Model {
            model: &model,
            params: &params,
        },
        &world.scenes,
        &goals,
        &world.trained_goals,
        &cfg.eval,
        cfg.base_seed,
    )?;
    let (random, random_records) = random_baseline(
        &world.scenes,
        &goals,
        &world.trained_goals,
        &cfg.eval,
        cfg.base_seed,
    )?;
    let hash_after = checkpoint::file_sha256(&ckpt_path)?;

    eval::write_success_csv(
        &out_dir.join("success_table.csv"),
        &[table.clone(), random.clone()],
    )?;
    eval::write_episodes_csv(
        &out_dir.join(format!("episodes_{}.csv", label.to_lowercase())),
        &label,
        &records,
    )?;
    eval::write_episodes_csv(&out_dir.join("episodes_random.csv"), "random", &random_records)?;

    Ok(EvalSummary {
        out_dir,
        table,
        random,
        checkpoint_hash_before: hash_before,
        checkpoint_hash_after: hash_after,
    })
}

pub struct FinetuneSummary {
    pub out_dir: PathBuf,
    pub series: CurveSeries,
}

/// Resume training from a checkpoint on freshly sampled goals at the
/// configured distance, per seed, and write the adaptation curves.
pub fn cmd_finetune(cfg: &RunConfig) -> Result<FinetuneSummary, CommandError> {
    let out_dir = prepare_out_dir(cfg)?;
    let ckpt_path = cfg
        .checkpoint
        .clone()
        .ok_or(CommandError::MissingCheckpoint)?;
    let world = load_world(cfg)?;
    let (model, params, opt_sq) = load_checkpoint_model(&ckpt_path, &world)?;
    let label = model.config().variant.name().to_string();

    let series = finetune(
        &label,
        &model,
        &params,
        Some(&opt_sq),
        &world,
        &cfg.eval,
        &cfg.hyper,
        &cfg.env,
    )?;
    eval::write_curves_csv(&out_dir.join("curves.csv"), std::slice::from_ref(&series))?;
    eval::write_curves_raw_csv(
        &out_dir.join("curves_raw.csv"),
        std::slice::from_ref(&series),
    )?;
    Ok(FinetuneSummary { out_dir, series })
}

pub struct AblateSummary {
    pub out_dir: PathBuf,
    pub tables: Vec<SuccessTable>,
    pub random: SuccessTable,
    pub curves: Vec<CurveSeries>,
}

/// Train all four variants under identical seeds, scenes and goals; run the
/// zero-shot and fine-tuning protocols on each; emit the combined table and
/// curves. The per-variant evaluation episode logs are written so the seed
/// discipline (identical (goal, trial, start) sequences) can be diffed.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblateSummary, CommandError> {
    let out_dir = prepare_out_dir(cfg)?;
    let world = load_world(cfg)?;
    let goals = all_cell_goals(&world);

    let mut tables = Vec::new();
    let mut curves = Vec::new();
    let mut start_sequences: Vec<Vec<(usize, grid::Cell, usize, grid::Cell)>> = Vec::new();

    for variant in Variant::ALL {
        let label = variant.name().to_string();
        let variant_dir = out_dir.join(label.to_lowercase());
        std::fs::create_dir_all(&variant_dir)?;

        let model = Model::new(model_config_for(cfg, &world, variant));
        let sink = CheckpointSink {
            dir: &variant_dir,
            model_cfg_text: model.config().to_kv_text(),
        };
        let out = trainer::train(
            &model,
            &cfg.hyper,
            &world,
            &cfg.env,
            cfg.base_seed,
            cfg.strict,
            None,
            Some(sink),
        )?;
        let ckpt_path = variant_dir.join("checkpoint_final.ckpt");
        checkpoint::save(&ckpt_path, &out.params, &out.opt_sq, out.steps)?;
        std::fs::write(
            ckpt_path.with_extension("cfg"),
            model.config().to_kv_text(),
        )?;
        let mut log = out.log;
        trainer::sort_log(&mut log);
        trainer::write_train_log(&variant_dir.join("train_log.csv"), &log)?;

        let (table, records) = zero_shot(
            &label,
            &EvalPolicy::Model {
                model: &model,
                params: &out.params,
            },
            &world.scenes,
            &goals,
            &world.trained_goals,
            &cfg.eval,
            cfg.base_seed,
        )?;
        eval::write_episodes_csv(
            &variant_dir.join("episodes.csv"),
            &label,
            &records,
        )?;
        start_sequences.push(
            records
                .iter()
                .map(|r| (r.scene_id, r.goal, r.trial, r.start))
                .collect(),
        );
        tables.push(table);

        let series = finetune(
            &label,
            &model,
            &out.params,
            Some(&out.opt_sq),
            &world,
            &cfg.eval,
            &cfg.hyper,
            &cfg.env,
        )?;
        curves.push(series);
    }

    // Seed discipline across variants: every model faced the same episodes.
    for seq in &start_sequences[1..] {
        assert_eq!(
            seq, &start_sequences[0],
            "evaluation sequences diverged across variants"
        );
    }

    let (random, _) = random_baseline(
        &world.scenes,
        &goals,
        &world.trained_goals,
        &cfg.eval,
        cfg.base_seed,
    )?;

    let mut all_tables = tables.clone();
    all_tables.push(random.clone());
    eval::write_success_csv(&out_dir.join("success_table.csv"), &all_tables)?;
    eval::write_curves_csv(&out_dir.join("curves.csv"), &curves)?;
    eval::write_curves_raw_csv(&out_dir.join("curves_raw.csv"), &curves)?;

    Ok(AblateSummary {
        out_dir,
        tables,
        random,
        curves,
    })
}

/// Run the oracle suite; returns true when everything passed.
pub fn cmd_verify(cfg: &RunConfig, out: &mut dyn std::io::Write) -> Result<bool, CommandError> {
    let flags = VerifyFlags {
        alg1_literal: cfg.hyper.alg1_literal,
    };
    let mut all = true;
    for check in verify::run_all(flags) {
        let status = if check.passed { "PASS" } else { "FAIL" };
        writeln!(out, "[{status}] {}: {}", check.name, check.detail)?;
        all &= check.passed;
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_text;

    fn fast_cfg(extra: &str) -> RunConfig {
        let base = "[model]\nembed_dim = 8\nhidden_dim = 16\nenc_hidden = 24\n\
                    [train]\ntotal_steps = 200\nworkers = 1\n\
                    [eval]\ntrials_per_goal = 2\nstep_cap = 60\nseeds = 1\nfinetune_budget = 150\nnew_goals_per_scene = 1\neval_threads = 2\n";
        let mut cfg = parse_config_text(&format!("{base}{extra}")).unwrap();
        cfg.strict = true;
        cfg
    }

    #[test]
    fn train_then_eval_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = fast_cfg("[run]\nvariant = USFA\n");
        cfg.out_dir = Some(dir.path().join("train"));
        let summary = cmd_train(&cfg).unwrap();
        assert!(summary.checkpoint.exists());
        assert!(summary.out_dir.join("train_log.csv").exists());
        assert!(summary.out_dir.join("resolved.cfg").exists());
        assert!(summary.steps >= 200);

        let mut eval_cfg = fast_cfg("");
        eval_cfg.out_dir = Some(dir.path().join("eval"));
        eval_cfg.checkpoint = Some(summary.checkpoint.clone());
        let eval_summary = cmd_eval(&eval_cfg).unwrap();
        assert_eq!(
            eval_summary.checkpoint_hash_before,
            eval_summary.checkpoint_hash_after
        );
        assert!(eval_summary.out_dir.join("success_table.csv").exists());
        assert!(eval_summary.out_dir.join("episodes_usfa.csv").exists());
        assert!(eval_summary.table.total_episodes() > 0);
    }

    #[test]
    fn train_zero_budget_writes_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = fast_cfg("");
        cfg.hyper.total_steps = 0;
        cfg.out_dir = Some(dir.path().to_path_buf());
        let summary = cmd_train(&cfg).unwrap();
        assert_eq!(summary.steps, 0);
        assert_eq!(summary.episodes, 0);
        assert!(summary.checkpoint.exists());
    }

    #[test]
    fn finetune_without_checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = fast_cfg("");
        cfg.out_dir = Some(dir.path().to_path_buf());
        assert!(matches!(
            cmd_finetune(&cfg),
            Err(CommandError::MissingCheckpoint)
        ));
    }

    #[test]
    fn missing_out_dir_is_reported() {
        let cfg = fast_cfg("");
        // Neither config `out` nor $VUSFA_OUT_DIR (the test env leaves it
        // unset) provides a directory.
        if std::env::var(crate::config::OUT_DIR_ENV).is_err() {
            assert!(matches!(cmd_train(&cfg), Err(CommandError::MissingOutDir)));
        }
    }

    #[test]
    fn finetune_writes_curves() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = fast_cfg("[run]\nvariant = USFA\n");
        cfg.out_dir = Some(dir.path().join("t"));
        let summary = cmd_train(&cfg).unwrap();

        let mut ft = fast_cfg("");
        ft.out_dir = Some(dir.path().join("ft"));
        ft.checkpoint = Some(summary.checkpoint);
        let out = cmd_finetune(&ft).unwrap();
        assert!(out.out_dir.join("curves.csv").exists());
        assert!(out.out_dir.join("curves_raw.csv").exists());
        assert_eq!(out.series.curves.len(), 1);
        let text = std::fs::read_to_string(out.out_dir.join("curves.csv")).unwrap();
        assert_eq!(text.lines().next().unwrap(), "model,seed,step,mean_len,std");
    }

    #[test]
    fn ablate_produces_four_variant_columns_and_consistent_sequences() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = fast_cfg("");
        cfg.out_dir = Some(dir.path().to_path_buf());
        cfg.hyper.total_steps = 120;
        cfg.eval.finetune_budget = 100;
        let summary = cmd_ablate(&cfg).unwrap();
        assert_eq!(summary.tables.len(), 4);
        assert_eq!(summary.curves.len(), 4);
        let text = std::fs::read_to_string(summary.out_dir.join("success_table.csv")).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(
            header,
            "Environment,#Trained,Total,%Trained,GVF,USFA,USFA_SFDP,VUSFA,random"
        );
        for v in ["gvf", "usfa", "usfa_sfdp", "vusfa"] {
            assert!(summary.out_dir.join(v).join("checkpoint_final.ckpt").exists());
            assert!(summary.out_dir.join(v).join("episodes.csv").exists());
        }
    }

    #[test]
    fn verify_command_prints_a_line_per_check() {
        let cfg = fast_cfg("");
        let mut buf = Vec::new();
        let ok = cmd_verify(&cfg, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(ok, "{text}");
        assert!(text.lines().count() >= 10);
        assert!(text.lines().all(|l| l.starts_with("[PASS]") || l.starts_with("[FAIL]")));
    }
}
