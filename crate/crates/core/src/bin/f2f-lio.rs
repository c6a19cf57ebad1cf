use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;

use f2f_lio::config::RunConfig;
use f2f_lio::estimator::ExtrinsicState;
use f2f_lio::eval::evaluate;
use f2f_lio::io::{load_trajectory, write_scenario};
use f2f_lio::pipeline::{format_metrics, run_pipeline};
use f2f_lio::se3::quat_from_euler;
use f2f_lio::sim::{make_scenario, NoiseLevel, ScenarioOptions};

#[derive(Parser)]
#[command(version, about = "LiDAR-inertial odometry with online extrinsic and time-delay calibration")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Noise {
    Noiseless,
    Realistic,
}

#[derive(Subcommand)]
enum Command {
    /// Run the estimator on a dataset described by a config file.
    Run { config: PathBuf },
    /// Write a simulated dataset and its run.cfg.
    Sim {
        /// corridor, room-orbit or figure-eight
        scenario: String,
        seed: u64,
        output: PathBuf,
        #[arg(long, value_enum, default_value = "noiseless")]
        noise: Noise,
        /// Length in seconds; the scenario default when omitted.
        #[arg(long)]
        duration: Option<f64>,
        /// Inject a (1, 1, 2) deg, 5 cm, 5 ms LiDAR-IMU miscalibration while
        /// the config starts from identity.
        #[arg(long)]
        miscalibrated: bool,
    },
    /// ATE, ARE and end-to-end error of an estimate against a truth file.
    Eval { estimate: PathBuf, truth: PathBuf },
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Run { config } => {
            let cfg = RunConfig::load(&config)?;
            let summary = run_pipeline(&cfg)?;
            print!("{}", format_metrics(&summary));
            if let Some(f) = &summary.run.failure {
                anyhow::bail!("run stopped early: {f}");
            }
        }
        Command::Sim { scenario, seed, output, noise, duration, miscalibrated } => {
            let mut opts = ScenarioOptions {
                noise: match noise {
                    Noise::Noiseless => NoiseLevel::Noiseless,
                    Noise::Realistic => NoiseLevel::Realistic,
                },
                duration,
                ..Default::default()
            };
            if miscalibrated {
                let (a, b) = (1f64.to_radians(), 2f64.to_radians());
                opts.extrinsic = ExtrinsicState { lever_arm: Vector3::repeat(0.05), rotation: quat_from_euler(a, a, b) };
                opts.td = 0.005;
            }
            let sc = make_scenario(&scenario, seed, &opts)?;
            write_scenario(&sc, &output, &ExtrinsicState::default(), 0.0)?;
            println!("{}: {} IMU samples, {} frames", output.display(), sc.imu.len(), sc.frames.len());
        }
        Command::Eval { estimate, truth } => {
            let m = evaluate(&load_trajectory(&estimate)?, &load_trajectory(&truth)?).context("evaluation")?;
            println!("ate_m = {}\nare_deg = {}\nend_to_end_m = {}\ndistance_m = {}\nposes = {}", m.ate, m.are, m.end_to_end, m.distance, m.poses);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
