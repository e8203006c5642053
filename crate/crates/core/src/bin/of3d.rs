use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use of3d::config::RunConfig;
use of3d::inference::{predict, Prediction};
use of3d::matching::bench_matchers;
use of3d::metrics::evaluate;
use of3d::model::PreparedScene;
use of3d::params::ParamStore;
use of3d::scene::{generate_synthetic_scene, load_scene, save_scene, SyntheticParams};
use of3d::trainer::{derive_seed, fit, load_dataset, split_checkpoint, summarize, CONFIG_FILE};
use of3d::{Error, Result};

#[derive(Parser)]
#[command(name = "of3d", version, about = "Point cloud segmentation with a shared query decoder")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic rooms as scene_<i>.of3d files.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        things: usize,
        /// Room extent as x,y,z in meters.
        #[arg(long, value_parser = parse_room, default_value = "4,4,2.5")]
        room: [f64; 3],
        #[arg(long, default_value_t = 44)]
        points_per_surface: usize,
        #[arg(long, default_value_t = 0.005)]
        noise: f64,
    },
    /// Train on a directory of scenes.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// `key = value` file; missing keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Predict instance, semantic and panoptic labels for one scene.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the config written next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a prediction file against a ground-truth scene.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the disentangled matcher against Hungarian.
    BenchMatching {
        #[arg(long, value_delimiter = ',', default_values_t = [64, 128, 256, 512, 1024])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_room(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [x, y, z] if v.iter().all(|&d| d > 0.0) => Ok([x, y, z]),
        _ => Err("expected three positive extents x,y,z".into()),
    }
}

fn existing(p: &Path) -> Result<&Path> {
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::Contract(format!("{} does not exist", p.display())))
    }
}

fn gen_data(out: &Path, n: usize, seed: u64, params: &SyntheticParams) -> Result<()> {
    fs::create_dir_all(out)?;
    for i in 0..n {
        let scene = generate_synthetic_scene(derive_seed(&[seed, i as u64]), params)?;
        let path = out.join(format!("scene_{i}.of3d"));
        save_scene(&scene, &path)?;
        println!("{} points {} instances {}", path.display(), scene.len(), scene.instance_ids().len());
    }
    Ok(())
}

fn train(data: &Path, config: Option<&Path>, out: &Path, resume: Option<&Path>, overrides: &[String]) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(existing(p)?)?,
        None => RunConfig::default(),
    };
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let scenes = load_dataset(existing(data)?)?;
    let summary = fit(scenes, cfg, out, resume.map(existing).transpose()?)?;
    print!("{}", summarize(&summary.records));
    println!("checkpoint {}", summary.checkpoint.display());
    Ok(())
}

fn infer(ckpt: &Path, scene: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg_path = match config {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
    };
    let cfg = RunConfig::load(existing(&cfg_path)?)?;
    let (params, _) = split_checkpoint(&ParamStore::load(existing(ckpt)?)?)?;
    let prep = PreparedScene::new(load_scene(existing(scene)?)?, &cfg.model)?;
    let pred = predict(&params, &cfg.model, &prep, &cfg.inference)?;
    pred.save(out)?;
    println!(
        "{} segments {} instances {}",
        out.display(),
        pred.num_segments,
        pred.instances.as_ref().map_or(0, Vec::len)
    );
    Ok(())
}

fn eval(pred: &Path, gt: &Path, out: Option<&Path>) -> Result<()> {
    let report = evaluate(&Prediction::load(existing(pred)?)?, &load_scene(existing(gt)?)?)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(p) = out {
        fs::write(p, text)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData {
            out,
            scenes,
            seed,
            things,
            room,
            points_per_surface,
            noise,
        } => {
            let params = SyntheticParams {
                room,
                n_things: things,
                points_per_surface,
                noise_sigma: noise,
                ..SyntheticParams::default()
            };
            gen_data(&out, scenes, seed, &params)
        }
        Cmd::Train {
            data,
            config,
            out,
            resume,
            overrides,
        } => train(&data, config.as_deref(), &out, resume.as_deref(), &overrides),
        Cmd::Infer {
            ckpt,
            scene,
            out,
            config,
        } => infer(&ckpt, &scene, &out, config.as_deref()),
        Cmd::Eval { pred, gt, out } => eval(&pred, &gt, out.as_deref()),
        Cmd::BenchMatching {
            sizes,
            trials,
            seed,
            out,
        } => {
            let text = bench_matchers(&sizes, trials, seed)?.to_text();
            print!("{text}");
            if let Some(p) = out {
                fs::write(p, text)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
