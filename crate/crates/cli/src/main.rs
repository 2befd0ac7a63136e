use std::collections::BTreeMap;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("BAGEL_LOG", "warn")).init();
    let env: BTreeMap<String, String> = std::env::vars().collect();
    let code = bagel_cli::run(
        std::env::args_os(),
        &env,
        &mut std::io::stdout(),
        &mut std::io::stderr(),
    );
    std::process::exit(code);
}
