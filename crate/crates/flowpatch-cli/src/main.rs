//! Command line front end for the flowpatch editing pipeline.
//!
//! Every failure leaves a machine-readable JSON line on stderr and a
//! distinct exit code: 2 for flag mistakes, 3 for file problems, 4 for
//! invalid requests or configuration, 5 for non-finite numerics.

mod commands;
mod runconfig;

use clap::{Parser, Subcommand};

/// Region edits on a small flow-matching image model.
#[derive(Parser)]
#[command(name = "flowpatch", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the edge map of a PNG image.
    Canny(commands::CannyArgs),
    /// Train a model on synthetic scenes and save a checkpoint.
    Train(commands::TrainArgs),
    /// Invert an image and replay it unchanged, reporting fidelity.
    Invert(commands::InvertArgs),
    /// Apply a region edit to an image.
    Edit(commands::EditArgs),
    /// Compare control variants over seeded add tasks.
    Ablate(commands::AblateArgs),
    /// Audit analytic gradients against finite differences.
    Gradcheck(commands::GradcheckArgs),
}

/// A failed run, bucketed by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Exit 2: flags missing, conflicting, or self-overwriting.
    BadFlags(String),
    /// Exit 3: a file could not be read or written.
    Io(String),
    /// Exit 4: the request or configuration is invalid.
    Invalid(String),
    /// Exit 5: non-finite numbers in the pipeline.
    NonFinite(String),
    /// Exit 1: gradient checks ran but did not pass.
    Checks(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Checks(_) => 1,
            Failure::BadFlags(_) => 2,
            Failure::Io(_) => 3,
            Failure::Invalid(_) => 4,
            Failure::NonFinite(_) => 5,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Failure::Checks(_) => "checks-failed",
            Failure::BadFlags(_) => "bad-flags",
            Failure::Io(_) => "io-error",
            Failure::Invalid(_) => "invalid-request",
            Failure::NonFinite(_) => "non-finite",
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Checks(m)
            | Failure::BadFlags(m)
            | Failure::Io(m)
            | Failure::Invalid(m)
            | Failure::NonFinite(m) => m,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.message() }).to_string()
    }

    /// Bucket a library error by its nature.
    pub fn from_lib(e: flowpatch::error::Error) -> Failure {
        use flowpatch::error::Error as E;
        match e {
            E::Io(_) | E::UnsupportedFormat(_) | E::Checkpoint(_) => Failure::Io(e.to_string()),
            E::NonFinite(_) | E::NonFiniteLoss(_) => Failure::NonFinite(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Cmd::Canny(a) => commands::canny(&a),
        Cmd::Train(a) => commands::train_cmd(&a),
        Cmd::Invert(a) => commands::invert(&a),
        Cmd::Edit(a) => commands::edit_cmd(&a),
        Cmd::Ablate(a) => commands::ablate(&a),
        Cmd::Gradcheck(a) => commands::gradcheck(&a),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(f) = run(cli) {
        eprintln!("{}", f.to_json());
        std::process::exit(f.code());
    }
}
