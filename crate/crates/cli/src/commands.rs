use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spikeyolo::energy::profile;
use spikeyolo::events::{aggregate, aggregate_window, load_events, PolarityMode};
use spikeyolo::layers::Mode;
use spikeyolo::model::data::splits;
use spikeyolo::model::decode::decode_with;
use spikeyolo::model::train::train_toy;
use spikeyolo::model::weights::{load_weights, save_weights};
use spikeyolo::spike_codec::verify_equivalence;
use spikeyolo::{Error, ModelConfig, SpikeTensor, SpikeYolo, Tensor4};

use crate::{Cli, Command, PolarityArg};

pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) => 2,
            Error::Diverged { .. } => 1,
            _ => 3,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: 3,
        message: message.into(),
    }
}

fn io_context(path: &Path) -> impl Fn(Error) -> CliError + '_ {
    move |e| {
        let mut err = CliError::from(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    }
}

const DEFAULT_SEED: u64 = 0;

fn config(cli: &Cli) -> CliResult<ModelConfig> {
    let path = cli.config.as_ref().ok_or_else(|| usage("--config is required"))?;
    let mut cfg = ModelConfig::load(path).map_err(io_context(path))?;
    if let Some(t) = cli.t {
        cfg.t = t;
    }
    if let Some(d) = cli.d {
        cfg.d = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Weights from `--weights`, or a seeded random initialisation.
fn model(cli: &Cli, cfg: &ModelConfig) -> CliResult<SpikeYolo> {
    match &cli.weights {
        Some(path) => Ok(load_weights(cfg, path).map_err(io_context(path))?),
        None => Ok(SpikeYolo::new(cfg, cli.seed.unwrap_or(DEFAULT_SEED))?),
    }
}

fn inference_model(m: SpikeYolo) -> CliResult<SpikeYolo> {
    Ok(if m.mode == Mode::Train { m.reparameterize()? } else { m })
}

fn read_tensor(path: &Path) -> CliResult<Tensor4> {
    let file = File::open(path).map_err(|e| io_context(path)(e.into()))?;
    Ok(Tensor4::read_from(std::io::BufReader::new(file)).map_err(io_context(path))?)
}

fn sink(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_context(p)(e.into()))?)),
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

pub fn run(cli: &Cli) -> CliResult<u8> {
    match &cli.command {
        Command::Infer {
            input,
            output,
            energy_csv,
            conf,
        } => {
            let cfg = config(cli)?;
            let m = inference_model(model(cli, &cfg)?)?;
            let x = read_tensor(input)?;
            let maps = m.forward(&x)?;
            let dets = decode_with(&maps, &cfg.head, conf.unwrap_or(cfg.head.conf_threshold));
            let mut out = sink(output.as_deref())?;
            for d in &dets {
                writeln!(out, "{}", serde_json::to_string(d).expect("detections serialize"))?;
            }
            out.flush()?;
            if let Some(path) = energy_csv {
                std::fs::write(path, profile(&m, &x)?.to_csv()).map_err(|e| io_context(path)(e.into()))?;
            }
            Ok(0)
        }
        Command::Verify { trials, tol } => verify(cli, *trials, *tol),
        Command::Energy { input, output, table } => {
            let cfg = config(cli)?;
            let m = model(cli, &cfg)?;
            let report = profile(&m, &read_tensor(input)?)?;
            let mut out = sink(output.as_deref())?;
            out.write_all(if *table { report.to_table() } else { report.to_csv() }.as_bytes())?;
            out.flush()?;
            Ok(0)
        }
        Command::Events {
            input,
            output,
            dt,
            t_end,
            polarity,
        } => {
            let stream = load_events(input).map_err(io_context(input))?;
            let mode = match polarity {
                PolarityArg::Two => PolarityMode::TwoChannel,
                PolarityArg::Combined => PolarityMode::Combined,
            };
            let t = cli.t.unwrap_or(1);
            let x = match t_end {
                Some(end) => aggregate_window(&stream, t, *dt, *end, mode)?,
                None => aggregate(&stream, t, *dt, mode)?,
            };
            std::fs::write(output, x.to_bytes()).map_err(|e| io_context(output)(e.into()))?;
            eprintln!("{} events -> {:?} ({} counted)", stream.len(), x.shape().dims(), x.sum());
            Ok(0)
        }
        Command::Reparam { output } => {
            let cfg = config(cli)?;
            let path = cli.weights.as_ref().ok_or_else(|| usage("reparam needs --weights"))?;
            let m = load_weights(&cfg, path).map_err(io_context(path))?;
            let merged = m.reparameterize()?;
            save_weights(&merged, output).map_err(io_context(output))?;
            eprintln!("parameters: {} -> {}", m.param_count(), merged.param_count());
            Ok(0)
        }
        Command::TrainToy { output, log, epochs } => {
            let cfg = config(cli)?;
            let ds = cfg.dataset.clone().ok_or_else(|| usage("config has no [dataset] section"))?;
            let mut tc = cfg.train.clone().ok_or_else(|| usage("config has no [train] section"))?;
            if let Some(seed) = cli.seed {
                tc.seed = seed;
            }
            if let Some(e) = epochs {
                tc.epochs = *e;
            }
            let (train, val) = splits(&ds)?;
            let mut m = SpikeYolo::new(&cfg, tc.seed)?;
            let mut log_out = match log {
                Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| io_context(p)(e.into()))?)),
                None => None,
            };
            let mut log_err = None;
            let result = train_toy(&mut m, &train, &val, &tc, |l| {
                let line = serde_json::json!({"epoch": l.epoch, "loss": l.loss, "lr": l.lr}).to_string();
                eprintln!("{line}");
                if let Some(w) = &mut log_out {
                    if let Err(e) = writeln!(w, "{line}") {
                        log_err.get_or_insert(e);
                    }
                }
            })?;
            if let Some(e) = log_err {
                return Err(e.into());
            }
            let summary = serde_json::json!({"final_map50": result.final_map50, "epochs": tc.epochs}).to_string();
            if let Some(w) = &mut log_out {
                writeln!(w, "{summary}")?;
                w.flush()?;
            }
            println!("{summary}");
            save_weights(&m, output).map_err(io_context(output))?;
            Ok(0)
        }
    }
}

fn verify(cli: &Cli, trials: usize, tol: f64) -> CliResult<u8> {
    let cfg = config(cli)?;
    let m = model(cli, &cfg)?;
    if trials == 0 {
        eprintln!("warning: 0 trials requested; nothing was checked");
        println!("PASS (vacuous)");
        return Ok(0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(DEFAULT_SEED));

    // reference path: train-mode weights, or the merged convs run densely
    // on integer activations when the file is already merged
    let merged = inference_model(m.clone())?;
    let reference = if m.mode == Mode::Train {
        m
    } else {
        let mut dense = m;
        dense.mode = Mode::Train;
        dense
    };

    let convs = merged.convs();
    let mut codec_worst = 0.0f64;
    for trial in 0..trials {
        let spec = &convs[trial % convs.len()].spec;
        let side = spec.k.max(rng.gen_range(4..=10));
        let d = cfg.d;
        let len = cfg.t * spec.c_in * side * side;
        let values = (0..len).map(|_| rng.gen_range(0..=d)).collect();
        let s = SpikeTensor::new((cfg.t, spec.c_in, side, side), values, d)?;
        codec_worst = codec_worst.max(verify_equivalence(spec, &s, tol)?.max_abs_diff);
    }

    let mut model_worst = 0.0f64;
    let shape = merged.input_shape();
    for _ in 0..trials {
        let x = Tensor4::from_fn(shape, |_, _, _, _| rng.gen_range(0.0..1.0));
        let a = reference.forward(&x)?;
        let b = merged.forward(&x)?;
        for (p, q) in a.iter().zip(&b) {
            model_worst = model_worst.max(p.map.max_abs_diff(&q.map)?);
        }
    }
    let pass = codec_worst <= tol && model_worst <= tol;
    println!("slot expansion (float32, {trials} trials): worst |diff| = {codec_worst:e}");
    println!("re-parameterized model ({trials} trials): worst |diff| = {model_worst:e}");
    println!("tolerance {tol:e}: {}", if pass { "PASS" } else { "FAIL" });
    if !pass {
        eprintln!("verification failed: worst |diff| {:e} > {tol:e}", codec_worst.max(model_worst));
    }
    Ok(if pass { 0 } else { 1 })
}
