fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DESKMARK_LOG", "info")).init();
    let vars = deskmark_cli::config::process_env();
    let code = deskmark_cli::main_with(
        std::env::args_os(),
        &vars,
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    );
    std::process::exit(code);
}
