//! The subcommands. Each reads its inputs, writes its artifacts under the
//! output directory and returns the paths it wrote.

use crate::config::{command_config, Header, RunConfig};
use crate::gradcheck::run_gradcheck;
use crate::manifest::{
    load_manifest, relative_path, write_json, write_manifest, Entry, LoadedManifest, ManifestKind,
};
use anyhow::{anyhow, bail, Context, Result};
use ovlabel_core::denoiser::{
    load_checkpoint, rasterize_bev, refine_proposals, save_checkpoint, train, DenoiserModel,
    RefineStats, TrainProgress,
};
use ovlabel_core::eval::{
    evaluate, pr_curves_csv, render_table, EvalScene, MetricsReport, ScoredBox,
};
use ovlabel_core::nn::AdamWState;
use ovlabel_core::proposal::{load_proposals, run_imcv, save_proposals, ProposalsFile};
use ovlabel_core::scene::{
    generate_scene, load_scene, oracle_seek, save_detections, save_scene, GtObject, Scene,
};
use ovlabel_core::Error;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Effective configuration plus the output directory.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Ctx {
    fn header(&self, command: &str, seed: u64) -> Header {
        Header::new(command, seed, command_config(&self.cfg, command))
    }

    fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        Ok(&self.out)
    }
}

pub fn gen_scenes(ctx: &Ctx, count: usize) -> Result<Vec<PathBuf>> {
    let base = ctx.cfg.seed.unwrap_or(0);
    ctx.cfg.scene.validate()?;
    let header = ctx.header("gen-scenes", base).to_value();
    let out = ctx.out_dir()?;
    let written: Vec<(PathBuf, u64)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let seed = base.wrapping_add(i as u64);
            let scene = generate_scene(&ctx.cfg.scene, seed)
                .with_context(|| format!("generating scene {i}"))?;
            let path = out.join(format!("scene_{i}.json"));
            save_scene(&path, &scene, Some(&header))?;
            Ok((path, seed))
        })
        .collect::<Result<_>>()?;
    let entries = written
        .iter()
        .enumerate()
        .map(|(i, (_, seed))| Entry {
            scene: format!("scene_{i}.json"),
            seed: *seed,
            detections: None,
            proposals: None,
        })
        .collect();
    let mut paths: Vec<PathBuf> = written.into_iter().map(|(p, _)| p).collect();
    paths.push(write_manifest(out, ManifestKind::Scenes, header, entries)?);
    Ok(paths)
}

fn load_checked_scene(m: &LoadedManifest, e: &Entry) -> Result<Scene> {
    let path = m.resolve(&e.scene);
    let scene = load_scene(&path).with_context(|| format!("loading scene {}", path.display()))?;
    if scene.seed != e.seed {
        bail!(Error::Config(format!(
            "{} has seed {} but {} lists seed {}",
            path.display(),
            scene.seed,
            m.path.display(),
            e.seed
        )));
    }
    Ok(scene)
}

pub fn propose(ctx: &Ctx, scenes: &Path) -> Result<Vec<PathBuf>> {
    let cfg = &ctx.cfg;
    cfg.seeker.validate()?;
    cfg.imcv.validate()?;
    cfg.validate()?;
    let m = load_manifest(scenes, &[ManifestKind::Scenes])?;
    let header = ctx.header("propose", cfg.seed.unwrap_or(0)).to_value();
    let out = ctx.out_dir()?;
    let results: Vec<Entry> = m
        .manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let scene = load_checked_scene(&m, e)?;
            let dets = oracle_seek(&scene, &cfg.seeker);
            let det_name = format!("detections_{i}.json");
            save_detections(out.join(&det_name), &dets, Some(&header))?;
            let (mut props, diag) = run_imcv(&scene, &dets, &cfg.imcv).with_context(|| {
                format!("proposing boxes for {}", m.resolve(&e.scene).display())
            })?;
            props.retain(|p| cfg.propose.categories.contains(&p.category));
            if let Some(bias) = &cfg.propose.bias {
                for p in props.iter_mut() {
                    p.bbox = bias.apply(&p.bbox);
                }
            }
            let scene_rel = relative_path(&m.resolve(&e.scene), out)?;
            let prop_name = format!("proposals_{i}.json");
            let mut file = ProposalsFile::new(scene_rel.clone(), scene.seed, props, diag);
            file.header = Some(header.clone());
            save_proposals(out.join(&prop_name), &file)?;
            Ok(Entry {
                scene: scene_rel,
                seed: scene.seed,
                detections: Some(det_name),
                proposals: Some(prop_name),
            })
        })
        .collect::<Result<_>>()?;
    let mut paths: Vec<PathBuf> = results
        .iter()
        .flat_map(|e| {
            [
                out.join(e.detections.as_ref().unwrap()),
                out.join(e.proposals.as_ref().unwrap()),
            ]
        })
        .collect();
    paths.push(write_manifest(
        out,
        ManifestKind::Proposals,
        header,
        results,
    )?);
    Ok(paths)
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub resume: Option<PathBuf>,
    /// Also write `checkpoint_step{N}.json` every this many steps.
    pub checkpoint_every: Option<u64>,
}

pub fn train_cmd(ctx: &Ctx, scenes: &Path, args: &TrainArgs) -> Result<Vec<PathBuf>> {
    let cfg = &ctx.cfg.train;
    cfg.validate()?;
    let m = load_manifest(scenes, &[ManifestKind::Scenes])?;
    let corpus: Vec<Scene> = m
        .manifest
        .entries
        .par_iter()
        .map(|e| load_checked_scene(&m, e))
        .collect::<Result<_>>()?;
    let header = ctx.header("train", cfg.seed);
    let hv = header.to_value();
    let (mut model, mut opt, mut progress) = match &args.resume {
        Some(p) => {
            let ck = load_checkpoint(p)
                .with_context(|| format!("loading checkpoint {}", p.display()))?;
            if ck.model.config != cfg.model {
                bail!(Error::Config(format!(
                    "{} was trained with a different model configuration",
                    p.display()
                )));
            }
            (ck.model, ck.optimizer, ck.progress)
        }
        None => {
            let model = DenoiserModel::new(cfg.model)?;
            let opt = AdamWState::new(&model.store);
            (model, opt, TrainProgress::default())
        }
    };
    let out = ctx.out_dir()?.to_path_buf();
    let mut paths = Vec::new();
    let every = args.checkpoint_every.filter(|k| *k > 0);
    let records = train(
        &mut model,
        &mut opt,
        &mut progress,
        &corpus,
        cfg,
        |_, model, opt, prog| {
            if let Some(k) = every {
                if prog.global_step % k == 0 {
                    let p = out.join(format!("checkpoint_step{}.json", prog.global_step));
                    save_checkpoint(&p, model, opt, prog, Some(&hv))?;
                    paths.push(p);
                }
            }
            Ok(())
        },
    )?;
    let ck = out.join("checkpoint.json");
    save_checkpoint(&ck, &model, &opt, &progress, Some(&hv))?;
    paths.push(ck);
    let mut csv = header.csv_comment();
    csv.push_str("step,epoch,loss,l_res,l_conf\n");
    for r in &records {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            r.step, r.epoch, r.loss, r.l_res, r.l_conf
        );
    }
    let loss = out.join("loss.csv");
    std::fs::write(&loss, csv).map_err(|e| Error::io(&loss, e))?;
    paths.push(loss);
    Ok(paths)
}

fn load_entry_proposals(m: &LoadedManifest, e: &Entry) -> Result<(ProposalsFile, Scene)> {
    let rel = e.proposals.as_ref().ok_or_else(|| {
        Error::schema(m.path.display().to_string(), "entry lacks a proposals path")
    })?;
    let path = m.resolve(rel);
    let file =
        load_proposals(&path).with_context(|| format!("loading proposals {}", path.display()))?;
    let scene = load_checked_scene(m, e)?;
    if file.scene_seed != scene.seed {
        bail!(Error::Config(format!(
            "{} was computed from scene seed {} but the manifest pairs it with seed {}",
            path.display(),
            file.scene_seed,
            scene.seed
        )));
    }
    Ok((file, scene))
}

pub fn refine(ctx: &Ctx, proposals: &Path, checkpoint: &Path) -> Result<Vec<PathBuf>> {
    let rc = &ctx.cfg.refine;
    ovlabel_core::denoiser::fuse_scores(0.0, 0.0, rc.fuse.w_iou, rc.fuse.w_seeker)?;
    let m = load_manifest(proposals, &[ManifestKind::Proposals])?;
    let ck = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let model = ck.model;
    rc.sampler.validate(&model.schedule)?;
    let header = ctx.header("refine", rc.sampler.seed).to_value();
    let out = ctx.out_dir()?;
    let entries: Vec<Entry> = m
        .manifest
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let (mut file, scene) = load_entry_proposals(&m, e)?;
            let bev = rasterize_bev(&scene, &model.config.bev)?;
            let stats: RefineStats =
                refine_proposals(&model, &bev, &mut file.proposals, &rc.sampler, &rc.fuse)
                    .with_context(|| format!("refining scene {}", m.resolve(&e.scene).display()))?;
            let scene_rel = relative_path(&m.resolve(&e.scene), out)?;
            file.scene = scene_rel.clone();
            file.header = Some(header.clone());
            file.refine_stats = Some(stats);
            let name = format!("refined_{i}.json");
            save_proposals(out.join(&name), &file)?;
            Ok(Entry {
                scene: scene_rel,
                seed: scene.seed,
                detections: None,
                proposals: Some(name),
            })
        })
        .collect::<Result<_>>()?;
    let mut paths: Vec<PathBuf> = entries
        .iter()
        .map(|e| out.join(e.proposals.as_ref().unwrap()))
        .collect();
    paths.push(write_manifest(out, ManifestKind::Refined, header, entries)?);
    Ok(paths)
}

/// What `eval` writes to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub version: u32,
    pub header: Header,
    pub report: MetricsReport,
}

pub const REPORT_VERSION: u32 = 1;

pub fn eval(ctx: &Ctx, proposals: &Path) -> Result<(MetricsReport, Vec<PathBuf>)> {
    let ec = &ctx.cfg.eval;
    let m = load_manifest(proposals, &[ManifestKind::Refined, ManifestKind::Proposals])?;
    let loaded: Vec<(ProposalsFile, Scene)> = m
        .manifest
        .entries
        .par_iter()
        .map(|e| load_entry_proposals(&m, e))
        .collect::<Result<_>>()?;
    let sets: Vec<(Vec<ScoredBox>, Vec<GtObject>)> = loaded
        .iter()
        .map(|(f, s)| {
            let preds = f
                .proposals
                .iter()
                .filter(|p| ec.categories.contains(&p.category))
                .map(|p| {
                    if ec.initial {
                        ScoredBox::initial(p)
                    } else {
                        ScoredBox::from_proposal(p)
                    }
                })
                .collect();
            let gts =
                s.gt.iter()
                    .filter(|g| ec.categories.contains(&g.category))
                    .cloned()
                    .collect();
            (preds, gts)
        })
        .collect();
    let scenes: Vec<EvalScene> = sets
        .iter()
        .map(|(p, g)| EvalScene { preds: p, gts: g })
        .collect();
    let report = evaluate(&scenes, ec.criterion);
    let header = ctx.header("eval", ctx.cfg.seed.unwrap_or(0));
    let out = ctx.out_dir()?;
    let mut paths = Vec::new();
    let json_path = out.join("report.json");
    write_json(
        &json_path,
        &ReportFile {
            version: REPORT_VERSION,
            header: header.clone(),
            report: report.clone(),
        },
    )?;
    paths.push(json_path);
    let txt_path = out.join("report.txt");
    std::fs::write(&txt_path, render_table(&report)).map_err(|e| Error::io(&txt_path, e))?;
    paths.push(txt_path);
    if ec.pr_csv {
        let p = out.join("pr_curves.csv");
        let mut csv = header.csv_comment();
        csv.push_str(&pr_curves_csv(&scenes, ec.criterion));
        std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
        paths.push(p);
    }
    Ok((report, paths))
}

pub fn gradcheck(ctx: &Ctx) -> Result<(crate::gradcheck::GradcheckSummary, Vec<PathBuf>)> {
    let gc = &ctx.cfg.gradcheck;
    if gc.states == 0 {
        bail!(Error::Config("gradcheck needs at least one state".into()));
    }
    let summary = run_gradcheck(gc)?;
    let header = ctx.header("gradcheck", gc.seed);
    let out = ctx.out_dir()?;
    let path = out.join("gradcheck.json");
    write_json(
        &path,
        &serde_json::json!({ "version": 1, "header": header, "summary": summary }),
    )?;
    if !summary.passed {
        let worst = summary
            .checks
            .iter()
            .filter(|c| !c.report.passed)
            .map(|c| {
                format!(
                    "{}: {:.3e} at {}[{}]",
                    c.name, c.report.max_rel_err, c.report.worst_param, c.report.worst_index
                )
            })
            .collect::<Vec<_>>()
            .join("; ");
        return Err(anyhow!("gradient check failed: {worst}"));
    }
    Ok((summary, vec![path]))
}
