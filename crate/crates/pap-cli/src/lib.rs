//! Library surface of the CLI so integration tests can drive commands
//! in-process.

pub mod args;
pub mod commands;
pub mod run;

use anyhow::Result;

pub fn dispatch(cli: args::Cli) -> Result<()> {
    match cli.command {
        args::Command::GenData(a) => commands::gen_data(&a),
        args::Command::Train(a) => commands::train(&a),
        args::Command::GenPatch(a) => commands::gen_patch(&a),
        args::Command::AttackEval(a) => commands::attack_eval(&a),
        args::Command::Advtrain(a) => commands::advtrain(&a),
        args::Command::Report(a) => commands::report(&a),
    }
}

/// Map failures onto the documented exit codes: 2 for missing prerequisite
/// artifacts, 3 for numeric instability, 1 otherwise.
pub fn exit_code_for(err: &anyhow::Error) -> i32 {
    if let Some(core) = err.downcast_ref::<pap_core::Error>() {
        match core {
            pap_core::Error::MissingPrerequisite { .. } => 2,
            pap_core::Error::NonFinite { .. } => 3,
            _ => 1,
        }
    } else {
        1
    }
}
