//! `topformer` command line: architecture description, cost analysis,
//! inference on PPM images, benchmarking and numerical self-checks.
//!
//! Exit codes: 0 success, 1 a numerical check failed, 2 bad usage or input,
//! 3 weight binding or file I/O failure.

mod args;

use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};
use topformer::analyzer;
use topformer::checks::{self, BenchConfig};
use topformer::iofmt::{self, Normalization};
use topformer::{Error, ForwardOptions, HeadKind, Model};

use args::{Cli, Command, InferArgs, ModelArgs};

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.into())
            .build_global()
        {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Bind(_) | Error::Io(_) => EXIT_IO,
                Error::Config(_) | Error::Argument(_) | Error::Input(_) | Error::Format { .. } => {
                    EXIT_USAGE
                }
                _ => EXIT_CHECK_FAILED,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_CHECK_FAILED
}

/// Builds the model for `args`, turning configuration and input-size
/// problems into clap usage errors (exit 2 with usage on stderr).
fn build_model(args: &ModelArgs) -> Model {
    let cfg = args.config();
    let (h, w) = args.input;
    let model = Model::build(cfg).and_then(|m| m.check_input(h, w).map(|_| m));
    match model {
        Ok(m) => m,
        Err(e) => Cli::command().error(ErrorKind::ValueValidation, e).exit(),
    }
}

fn status(pass: bool) -> ExitCode {
    if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK_FAILED)
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Describe(m) => {
            let model = build_model(&m);
            print!("{}", analyzer::describe(&model, m.input.0, m.input.1)?);
        }
        Command::Analyze {
            model: m,
            layers,
            tsv,
        } => {
            let model = build_model(&m);
            let report = analyzer::count_flops(&model, m.input.0, m.input.1)?;
            if tsv {
                print!("{}", report.to_tsv());
            } else if layers {
                print!("{}", report.to_table());
            } else {
                print!("{report}");
            }
        }
        Command::Init {
            model: m,
            seed,
            folded,
            out,
        } => {
            let model = build_model(&m);
            let mut store = iofmt::random_init(&model, seed)?;
            if folded {
                store = model.bind(&store)?.fold_bn()?.weights()?;
            }
            iofmt::save_weights(&store, &out)
                .with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} ({} tensors)", out.display(), store.len());
        }
        Command::Infer(a) => infer(&a)?,
        Command::Bench {
            model: m,
            warmup,
            iters,
            seed,
        } => {
            let model = build_model(&m);
            let bc = BenchConfig {
                warmup,
                iters: iters as usize,
                threads: None,
                seed,
            };
            let report = checks::bench(model.config().clone(), m.input.0, m.input.1, &bc)?;
            println!("{report}");
        }
        Command::Gradcheck { seed, tol } => {
            if !(tol > 0.0 && tol.is_finite()) {
                Cli::command()
                    .error(
                        ErrorKind::ValueValidation,
                        format!("--tol must be positive, got {tol}"),
                    )
                    .exit();
            }
            let t = Instant::now();
            let reports = checks::gradcheck_suite(seed, tol)?;
            for r in &reports {
                println!("{r}");
            }
            let failed = reports.iter().filter(|r| !r.pass).count();
            eprintln!(
                "{} checks, {failed} failed, {:.2}s",
                reports.len(),
                t.elapsed().as_secs_f64()
            );
            return Ok(status(failed == 0));
        }
        Command::Selftest { seed } => {
            let results = checks::selftest(seed)?;
            for r in &results {
                println!("{r}");
            }
            return Ok(status(results.iter().all(|r| r.pass)));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn infer(a: &InferArgs) -> Result<()> {
    let model = build_model(&a.model);
    let segmentation = model.config().head_kind != HeadKind::Classification;
    if segmentation && a.out.is_none() {
        Cli::command()
            .error(
                ErrorKind::MissingRequiredArgument,
                "--out is required for segmentation heads",
            )
            .exit();
    }
    let store = match &a.weights {
        Some(p) => {
            iofmt::load_weights(p).with_context(|| format!("reading weights {}", p.display()))?
        }
        None => {
            eprintln!("no --weights given, using random weights (seed {})", a.seed);
            iofmt::random_init(&model, a.seed)?
        }
    };
    let model = model.bind(&store)?.fold_bn()?;

    let norm = Normalization {
        mean: a.mean,
        std: a.std,
    };
    let img = iofmt::read_ppm(&a.image, &norm)
        .with_context(|| format!("reading image {}", a.image.display()))?;
    let (h, w) = (img.dims()[2], img.dims()[3]);
    if (h, w) != a.model.input {
        eprintln!("note: image is {h}x{w}, overriding --input");
    }
    model.check_input(h, w)?;

    let t = Instant::now();
    let opts = ForwardOptions {
        upsample_to_input: a.upsample_to_input,
    };
    let out = model.forward(&img, opts)?;
    let forward_ms = t.elapsed().as_secs_f64() * 1e3;

    if segmentation {
        let path = a.out.as_ref().expect("checked above");
        iofmt::write_pgm(&out, path).with_context(|| format!("writing {}", path.display()))?;
        println!(
            "wrote {} ({}x{})",
            path.display(),
            out.dims()[2],
            out.dims()[3]
        );
        if let Some(cp) = &a.colorized {
            let palette = match &a.palette {
                Some(pp) => iofmt::read_palette(pp)
                    .with_context(|| format!("reading palette {}", pp.display()))?,
                None => iofmt::default_palette(out.dims()[1]),
            };
            iofmt::write_ppm_colorized(&out, &palette, cp)
                .with_context(|| format!("writing {}", cp.display()))?;
            println!("wrote {}", cp.display());
        }
    } else {
        let mut scores: Vec<(usize, f32)> = out.data().iter().copied().enumerate().collect();
        scores.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        for (class, score) in scores.iter().take(5) {
            println!("{class}\t{score:.6}");
        }
    }
    println!(
        "forward_ms={forward_ms:.3} input={h}x{w} threads={}",
        rayon::current_num_threads()
    );
    Ok(())
}
