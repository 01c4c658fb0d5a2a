use std::process::ExitCode;

fn main() -> ExitCode {
    let mut stdout = std::io::stdout().lock();
    match rsgn_cli::init_threads().and_then(|_| rsgn_cli::run(std::env::args_os(), &mut stdout)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rsgn: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
