use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match dlmap_cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            std::process::exit(2);
        }
    };
    if let Err(err) = dlmap_cli::run(cli) {
        let (_, code) = dlmap_cli::classify(&err);
        eprintln!("{}", dlmap_cli::error_line(&err));
        std::process::exit(code);
    }
}
