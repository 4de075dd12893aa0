use std::process::ExitCode;

fn main() -> ExitCode {
    match cdcml_cli::run(std::env::args_os(), std::env::vars(), &mut std::io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (category, code) = cdcml_cli::classify(&err);
            eprintln!("{category}: {}", cdcml_cli::describe(&err));
            ExitCode::from(code)
        }
    }
}
