use xdiff::cli;

fn main() {
    let code = match cli::parse_cli(std::env::args_os()) {
        Ok(cfg) => match cli::run(&cfg) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
        Err(cli::CliError::Help(text)) => {
            print!("{text}");
            0
        }
        Err(cli::CliError::Usage(text)) => {
            eprint!("{text}");
            2
        }
        Err(cli::CliError::Invalid(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
