use clap::Parser;
use pnp_cli::args::{Cli, Command};
use pnp_cli::commands;
use pnp_cli::Result;

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let n = commands::gen_data(&a)?;
            println!("wrote {n} samples to {}", a.out.display());
        }
        Command::Train(a) => {
            let s = commands::train(&a)?;
            if let Some(step) = s.resumed_from {
                println!("resumed from step {step}");
            }
            println!("trained {} steps", s.steps_run);
            for c in &s.checkpoints {
                println!("checkpoint {}", c.display());
            }
        }
        Command::Eval(a) => {
            for r in commands::eval(&a)? {
                println!("report {}", r.display());
            }
        }
        Command::Analyze(a) => {
            let s = commands::analyze(&a)?;
            println!("{} records", s.records);
            for i in &s.importances {
                println!("{:<18} gini {:.4}  permutation {:.4}", i.feature, i.gini, i.permutation);
            }
            println!("survivors: {:?} ({:?})", s.filter.survivors, s.filter.stop);
        }
        Command::Serve(a) => commands::serve(&a, |addr| println!("listening on http://{addr}"))?,
        Command::Teach(a) => {
            let s = commands::teach(&a, |st| {
                println!(
                    "demo {} steps {}/{} losses {:?}",
                    st.dataset_size, st.step.attention, st.step.transport, st.losses
                )
            })?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
