//! `vats-plan` subcommands.
//!
//! Exit codes: 0 success, 1 plan invalid, 2 bad input, 3 no feasible plan.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;
use vats_core::constraints::PlanParams;
use vats_core::planner::{auto_plan, AutoPlanOptions, CandidateSet, PlannerError};

use crate::api::{router, AppState};
use crate::files::{load_scene, write_phantom_fixtures, FileError, LoadedScene, PlanFile};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INVALID: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_INFEASIBLE: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "vats-plan",
    version,
    about = "Trocar placement planning for thoracoscopic surgery"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Default, clap::Args)]
pub struct Overrides {
    /// Voxel edge length in mm.
    #[arg(long)]
    pub spacing: Option<f64>,
    /// Obstruction capsule radius in mm.
    #[arg(long)]
    pub capsule_radius: Option<f64>,
    /// Tool cone half-angle in degrees.
    #[arg(long)]
    pub half_angle: Option<f64>,
}

impl Overrides {
    fn apply(&self, mut params: PlanParams) -> PlanParams {
        if let Some(s) = self.spacing {
            params.spacing_mm = s;
        }
        if let Some(r) = self.capsule_radius {
            params.capsule_radius_mm = r;
        }
        if let Some(a) = self.half_angle {
            params.half_angle_deg = a;
        }
        params
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Re-evaluate a plan and print its report.
    Validate {
        manifest: PathBuf,
        plan: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Search entry candidates for the plan with the largest operable volume.
    AutoPlan {
        manifest: PathBuf,
        /// Use every n-th region triangle as a candidate.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Treat the manipulation-angle band as advisory.
        #[arg(long)]
        ignore_angle_band: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Serve the HTTP API.
    Serve {
        manifest: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
    /// Write the overlap cell centres of a plan.
    VoxelExport {
        manifest: PathBuf,
        plan: PathBuf,
        /// CSV destination; stdout gets a JSON summary either way.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write the synthetic thorax fixtures.
    Phantom {
        #[arg(long, default_value = "fixtures")]
        out: PathBuf,
    },
}

fn input_error(e: impl std::fmt::Display) -> u8 {
    eprintln!("error: {e}");
    EXIT_INPUT
}

fn load(manifest: &Path) -> Result<LoadedScene, u8> {
    load_scene(manifest).map_err(input_error)
}

pub fn run(cli: Cli) -> u8 {
    match cli.command {
        Command::Validate {
            manifest,
            plan,
            overrides,
        } => validate(&manifest, &plan, overrides),
        Command::AutoPlan {
            manifest,
            stride,
            ignore_angle_band,
            overrides,
        } => run_auto_plan(&manifest, stride, ignore_angle_band, overrides),
        Command::Serve { manifest, port, host } => serve(&manifest, SocketAddr::new(host, port)),
        Command::VoxelExport {
            manifest,
            plan,
            csv,
            overrides,
        } => voxel_export(&manifest, &plan, csv.as_deref(), overrides),
        Command::Phantom { out } => match write_phantom_fixtures(&out) {
            Ok(()) => {
                println!("{}", json!({ "out": out, "manifest": out.join("manifest.json") }));
                EXIT_OK
            }
            Err(e) => input_error(e),
        },
    }
}

fn validate(manifest: &Path, plan_path: &Path, overrides: Overrides) -> u8 {
    let scene = match load(manifest) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let plan = match PlanFile::load(plan_path) {
        Ok(p) => p,
        Err(e) => return input_error(e),
    };
    let params = overrides.apply(scene.params());
    let eval = match plan.evaluate(&scene.scene, &params) {
        Ok(e) => e,
        Err(e) => return input_error(e),
    };
    if let Some(reason) = plan.staleness(&eval.report) {
        eprintln!("warning: stale plan report: {reason}");
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&eval.report).expect("report serializes")
    );
    if eval.report.overall_valid {
        EXIT_OK
    } else {
        EXIT_INVALID
    }
}

fn run_auto_plan(manifest: &Path, stride: usize, ignore_angle_band: bool, overrides: Overrides) -> u8 {
    let scene = match load(manifest) {
        Ok(s) => s,
        Err(code) => return code,
    };
    if stride == 0 {
        return input_error("--stride must be at least 1");
    }
    let params = overrides.apply(scene.params());
    let candidates = CandidateSet::from_scene(&scene.scene, stride);
    let options = AutoPlanOptions {
        require_in_band: !ignore_angle_band,
    };
    match auto_plan(&scene.scene, &candidates, &params, options) {
        Ok(best) => {
            eprintln!(
                "{} of {} candidate triples feasible; best {:.3} L",
                best.feasible, best.triples, best.report.operable_volume_l
            );
            let manifest_ref = scene.path.display().to_string();
            let plan = PlanFile::new(manifest_ref, &best.left, &best.right, &best.camera, Some(best.report));
            println!("{}", plan.to_json());
            EXIT_OK
        }
        Err(PlannerError::NoFeasiblePlan { triples, failures }) => {
            eprintln!("error: no feasible plan among {triples} candidate triples");
            println!("{}", json!({ "triples": triples, "failures": failures }));
            EXIT_INFEASIBLE
        }
        Err(e) => input_error(e),
    }
}

fn serve(manifest: &Path, addr: SocketAddr) -> u8 {
    let scene = match load(manifest) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let params = scene.params();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => return input_error(e),
    };
    let result = runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(AppState::new(scene, params)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => input_error(e),
    }
}

fn voxel_export(manifest: &Path, plan_path: &Path, csv: Option<&Path>, overrides: Overrides) -> u8 {
    let scene = match load(manifest) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let params = overrides.apply(scene.params());
    let eval = match PlanFile::load(plan_path).and_then(|p| p.evaluate(&scene.scene, &params)) {
        Ok(e) => e,
        Err(e) => return input_error(e),
    };
    if let Some(path) = csv {
        if let Err(e) = write_cells_csv(path, &eval.overlap_cells) {
            return input_error(e);
        }
    }
    println!(
        "{}",
        json!({
            "spacing_mm": params.spacing_mm,
            "cell_count": eval.overlap_cells.len(),
            "volume_l": eval.report.operable_volume_l,
        })
    );
    EXIT_OK
}

fn write_cells_csv(path: &Path, cells: &[vats_core::Point3<f64>]) -> Result<(), FileError> {
    let io = |source| FileError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(out, "x_mm,y_mm,z_mm").map_err(io)?;
    for p in cells {
        writeln!(out, "{},{},{}", p.x, p.y, p.z).map_err(io)?;
    }
    out.flush().map_err(io)
}
