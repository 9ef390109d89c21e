use std::io;

use env_logger::Env;

fn main() {
    env_logger::Builder::from_env(Env::default().filter_or("SETN_LOG", "warn")).init();
    let code = setn::cli::run(std::env::args_os(), &mut io::stdout(), &mut io::stderr());
    std::process::exit(code);
}
