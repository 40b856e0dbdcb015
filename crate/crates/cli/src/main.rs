//! Command-line harness: corpus generation, training, evaluation, the
//! ablation matrix, and filter/feature visualization.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cf_fuse_core::config::Config;
use cf_fuse_core::data::{read_corpus, Corpus};
use cf_fuse_core::error::Error;
use cf_fuse_core::losses::LossReport;
use cf_fuse_core::model::Model;
use cf_fuse_core::optim::Sgd;
use cf_fuse_core::rsr::RsrOutput;
use cf_fuse_core::tensor::Tensor;
use cf_fuse_core::{io as tio, pnm, spectral, train};

#[derive(Parser)]
#[command(name = "cf-fuse", version, about = "Coarse-to-fine RGB/IR fusion detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired corpus described by the config.
    GenData {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Train a detector; writes checkpoint.cfc and losses.csv.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes metrics.csv.
    Eval {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus directory (defaults to data.dir from the config).
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Train and evaluate the four fusion variants over several seeds.
    Ablate {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Dump the spectral filter triptych for one scene.
    Filters {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export filters, expert overlays, gates, and the SNR-annotated
    /// before/after pair for one scene.
    Visualize {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // keep clap's rendered message but pin the usage exit code
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> cf_fuse_core::Result<()> {
    match cli.command {
        Command::GenData { config } => gen_data(&config),
        Command::Train { config, resume } => cmd_train(&config, resume.as_deref()),
        Command::Eval {
            config,
            checkpoint,
            corpus,
        } => cmd_eval(&config, &checkpoint, corpus.as_deref()),
        Command::Ablate { config } => cmd_ablate(&config),
        Command::Filters {
            config,
            checkpoint,
            scene,
            out,
        } => cmd_filters(&config, &checkpoint, scene, out.as_deref()),
        Command::Visualize {
            config,
            checkpoint,
            scene,
            out,
        } => cmd_visualize(&config, &checkpoint, scene, out.as_deref()),
    }
}

fn load_corpus(cfg: &Config, explicit: Option<&Path>) -> cf_fuse_core::Result<Corpus> {
    let dir = explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.data_config().map(|d| d.dir).unwrap_or_default());
    if !dir.join("corpus.cfg").exists() {
        return Err(Error::data(format!(
            "no corpus at {} (run `cf-fuse gen-data` first)",
            dir.display()
        )));
    }
    read_corpus(&dir)
}

fn ensure_dir(dir: &Path) -> cf_fuse_core::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn gen_data(config: &Path) -> cf_fuse_core::Result<()> {
    let cfg = Config::load(config)?;
    let data_cfg = cfg.data_config()?;
    let seed = cfg.seed()?;
    let corpus = cf_fuse_core::data::generate_corpus(&data_cfg, seed)?;
    cf_fuse_core::data::write_corpus(&data_cfg.dir, &corpus)?;
    let boxes: usize = corpus.scenes.iter().map(|s| s.boxes.len()).sum();
    println!(
        "wrote {} scenes ({} boxes) to {}",
        corpus.scenes.len(),
        boxes,
        data_cfg.dir.display()
    );
    Ok(())
}

fn build_model(cfg: &Config, seed: u64) -> cf_fuse_core::Result<Model> {
    Model::new(cfg.model_config()?, seed)
}

fn cmd_train(config: &Path, resume: Option<&Path>) -> cf_fuse_core::Result<()> {
    let cfg = Config::load(config)?;
    let seed = cfg.seed()?;
    let corpus = load_corpus(&cfg, None)?;
    let data_cfg = cfg.data_config()?;
    let train_cfg = cfg.train_config()?;
    let (train_scenes, _) = corpus.split(data_cfg.train_fraction);

    let model = build_model(&cfg, seed)?;
    let mut opt = Sgd::new(
        &model.params(),
        train_cfg.lr,
        train_cfg.momentum,
        train_cfg.weight_decay,
    );
    let start_epoch = match resume {
        Some(path) => {
            let entries = tio::read_checkpoint(path)?;
            train::restore_checkpoint(&model, &mut opt, &entries)?
        }
        None => 0,
    };

    let out_dir = cfg.out_dir();
    ensure_dir(&out_dir)?;
    let ckpt_path = out_dir.join("checkpoint.cfc");
    let losses_path = out_dir.join("losses.csv");
    let mut losses_file = std::fs::File::create(&losses_path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(&losses_path, e))?;
    writeln!(losses_file, "{}", LossReport::CSV_HEADER)
        .map_err(|e| Error::io(&losses_path, e))?;

    let n = train_scenes.len();
    let mut epoch_done = start_epoch;
    let result = train::train_model(
        &model,
        train_scenes,
        &train_cfg,
        seed,
        start_epoch,
        &mut opt,
        |step, report| {
            let _ = writeln!(losses_file, "{}", report.csv_row(step));
            if (step + 1) % n == 0 {
                epoch_done = (step + 1) / n;
                eprintln!("epoch {}/{}: total {:.4}", epoch_done, train_cfg.epochs, report.total);
            }
        },
    );
    losses_file.flush().map_err(|e| Error::io(&losses_path, e))?;
    result?;

    let entries = train::checkpoint_entries(&model, &opt, train_cfg.epochs);
    tio::write_checkpoint(&ckpt_path, &entries)?;
    println!("checkpoint: {}", ckpt_path.display());
    println!("losses: {}", losses_path.display());
    Ok(())
}

fn cmd_eval(config: &Path, checkpoint: &Path, corpus: Option<&Path>) -> cf_fuse_core::Result<()> {
    let cfg = Config::load(config)?;
    let corpus = load_corpus(&cfg, corpus)?;
    let data_cfg = cfg.data_config()?;
    let eval_cfg = cfg.eval_config()?;
    let model = build_model(&cfg, cfg.seed()?)?;
    let entries = tio::read_checkpoint(checkpoint)?;
    train::load_model_params(&model, &entries)?;

    let (_, eval_scenes) = corpus.split(data_cfg.train_fraction);
    let scenes = if eval_scenes.is_empty() {
        &corpus.scenes[..]
    } else {
        eval_scenes
    };
    let metrics = train::evaluate_model(&model, scenes, &eval_cfg)?;
    let out_dir = cfg.out_dir();
    ensure_dir(&out_dir)?;
    let path = out_dir.join("metrics.csv");
    std::fs::write(&path, metrics.csv()).map_err(|e| Error::io(&path, e))?;
    print!("{}", metrics.csv());
    println!("metrics: {}", path.display());
    Ok(())
}

fn cmd_ablate(config: &Path) -> cf_fuse_core::Result<()> {
    let cfg = Config::load(config)?;
    let corpus = load_corpus(&cfg, None)?;
    let data_cfg = cfg.data_config()?;
    let train_cfg = cfg.train_config()?;
    let eval_cfg = cfg.eval_config()?;
    let base_seed = cfg.seed()?;
    let n_seeds = cfg.get_usize("ablate.seeds", 5)?;
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| base_seed + i).collect();

    let cells = train::run_ablation(
        &corpus,
        &cfg.model_config()?,
        &train_cfg,
        &eval_cfg,
        data_cfg.train_fraction,
        &seeds,
    )?;
    let rows = train::summarize_ablation(&cells);

    let out_dir = cfg.out_dir();
    ensure_dir(&out_dir)?;
    let summary_path = out_dir.join("ablation.csv");
    let cells_path = out_dir.join("ablation_seeds.csv");
    std::fs::write(&summary_path, train::ablation_summary_csv(&rows))
        .map_err(|e| Error::io(&summary_path, e))?;
    std::fs::write(&cells_path, train::ablation_cells_csv(&cells))
        .map_err(|e| Error::io(&cells_path, e))?;

    for r in &rows {
        println!(
            "{:9} mAP50 {:.3}±{:.3}  mAP {:.3}±{:.3}  MR-2 {:.3}±{:.3}",
            r.variant, r.map50_mean, r.map50_std, r.map_mean, r.map_std, r.mr2_mean, r.mr2_std
        );
    }
    println!("table: {}", summary_path.display());
    Ok(())
}

fn normalize_unit(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    values.iter().map(|v| (v - lo) / span).collect()
}

fn shifted_view(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            out[((u + h / 2) % h) * w + (v + w / 2) % w] = plane[u * w + v];
        }
    }
    out
}

/// amplitude / filter / filtered-amplitude triptych for one modality.
fn write_filter_panel(dir: &Path, tag: &str, out: &RsrOutput) -> cf_fuse_core::Result<()> {
    let (h, w) = (out.spectrum.height, out.spectrum.width);
    let amp = spectral::log_amplitude_shifted(&out.spectrum, 0);
    let filtered = spectral::log_amplitude_shifted(&out.filtered, 0);
    let filter = shifted_view(&out.filter.values.to_vec(), h, w);
    for (name, plane) in [
        ("amplitude", amp),
        ("filter", filter),
        ("filtered", filtered),
    ] {
        let path = dir.join(format!("filters_{tag}_{name}.pgm"));
        pnm::write_pgm(&path, &Tensor::new(&[1, h, w], plane))?;
    }
    Ok(())
}

fn rsr_outputs(
    model: &Model,
    scene: &cf_fuse_core::data::Scene,
) -> cf_fuse_core::Result<(RsrOutput, RsrOutput)> {
    let (Some(rv), Some(ri)) = (&model.rsr_v, &model.rsr_i) else {
        return Err(Error::data(
            "filter export needs model.use_rsr=true in the config",
        ));
    };
    Ok((rv.apply(&scene.tensor_v()), ri.apply(&scene.tensor_i())))
}

fn cmd_filters(
    config: &Path,
    checkpoint: &Path,
    scene_idx: usize,
    out: Option<&Path>,
) -> cf_fuse_core::Result<()> {
    let cfg = Config::load(config)?;
    let corpus = load_corpus(&cfg, None)?;
    let scene = corpus
        .scenes
        .get(scene_idx)
        .ok_or_else(|| Error::data(format!("scene {scene_idx} out of range")))?;
    let model = build_model(&cfg, cfg.seed()?)?;
    train::load_model_params(&model, &tio::read_checkpoint(checkpoint)?)?;

    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir().join("filters"));
    ensure_dir(&out_dir)?;
    let (rv, ri) = rsr_outputs(&model, scene)?;
    write_filter_panel(&out_dir, "v", &rv)?;
    write_filter_panel(&out_dir, "i", &ri)?;
    println!("filter panels in {}", out_dir.display());
    Ok(())
}

fn cmd_visualize(
    config: &Path,
    checkpoint: &Path,
    scene_idx: usize,
    out: Option<&Path>,
) -> cf_fuse_core::Result<()> {
    let cfg = Config::load(config)?;
    let corpus = load_corpus(&cfg, None)?;
    let scene = corpus
        .scenes
        .get(scene_idx)
        .ok_or_else(|| Error::data(format!("scene {scene_idx} out of range")))?;
    let model = build_model(&cfg, cfg.seed()?)?;
    train::load_model_params(&model, &tio::read_checkpoint(checkpoint)?)?;

    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir().join("visualize"));
    ensure_dir(&out_dir)?;

    // filter triptychs + before/after pair with SNR annotation
    if model.cfg.use_rsr {
        let (rv, ri) = rsr_outputs(&model, scene)?;
        write_filter_panel(&out_dir, "v", &rv)?;
        write_filter_panel(&out_dir, "i", &ri)?;

        pnm::write_ppm(&out_dir.join("before_v.ppm"), &scene.tensor_v())?;
        pnm::write_pgm(&out_dir.join("before_i.pgm"), &scene.tensor_i())?;
        let clamp_v = Tensor::new(
            rv.cleaned.dims(),
            rv.cleaned.to_vec().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        );
        let clamp_i = Tensor::new(
            ri.cleaned.dims(),
            ri.cleaned.to_vec().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        );
        pnm::write_ppm(&out_dir.join("after_v.ppm"), &clamp_v)?;
        pnm::write_pgm(&out_dir.join("after_i.pgm"), &clamp_i)?;

        let snr = |img: &Tensor, clean: &Tensor| cf_fuse_core::eval::snr_db(img, clean);
        let clean_v = scene.clean_tensor_v();
        let clean_i = scene.clean_tensor_i();
        let mut csv = String::from("modality,snr_in_db,snr_out_db\n");
        csv.push_str(&format!(
            "v,{},{}\n",
            snr(&scene.tensor_v(), &clean_v),
            snr(&rv.cleaned, &clean_v)
        ));
        csv.push_str(&format!(
            "i,{},{}\n",
            snr(&scene.tensor_i(), &clean_i),
            snr(&ri.cleaned, &clean_i)
        ));
        let path = out_dir.join("snr.csv");
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    }

    // gate decisions and per-expert overlays
    let trace = model.forward(&scene.tensor_v(), &scene.tensor_i(), false);
    let mut gates = String::from("scale,w_i,w_v,r_i,r_v\n");
    for d in &trace.dfs.decisions {
        gates.push_str(&format!(
            "{},{},{},{},{}\n",
            d.scale, d.w_i, d.w_v, d.r_i as u8, d.r_v as u8
        ));
    }
    let gates_path = out_dir.join("gates.csv");
    std::fs::write(&gates_path, gates).map_err(|e| Error::io(&gates_path, e))?;

    let gray_v: Vec<f64> = {
        let v = &scene.image_v;
        let plane = scene.size * scene.size;
        (0..plane)
            .map(|i| (v[i] + v[plane + i] + v[2 * plane + i]) / 3.0)
            .collect()
    };
    for (tag, experts, base) in [
        ("i", &trace.dfs.expert_i, &scene.image_i),
        ("v", &trace.dfs.expert_v, &gray_v),
    ] {
        for (s, feat) in experts.iter().enumerate() {
            let d = feat.dims();
            let mean: Vec<f64> = {
                let data = feat.to_vec();
                let plane = d[1] * d[2];
                (0..plane)
                    .map(|i| (0..d[0]).map(|c| data[c * plane + i]).sum::<f64>() / d[0] as f64)
                    .collect()
            };
            let up = Tensor::new(&[1, d[1], d[2]], normalize_unit(&mean))
                .resize_nearest(scene.size, scene.size);
            let overlay: Vec<f64> = up
                .to_vec()
                .iter()
                .zip(base.iter())
                .map(|(f, g)| 0.5 * f + 0.5 * g)
                .collect();
            let path = out_dir.join(format!("expert_{tag}{s}.pgm"));
            pnm::write_pgm(&path, &Tensor::new(&[1, scene.size, scene.size], overlay))?;
        }
    }
    println!("visualization in {}", out_dir.display());
    Ok(())
}
