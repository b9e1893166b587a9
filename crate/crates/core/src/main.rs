fn main() {
    let code = tcsim::cli::main_with_args(std::env::args_os(), std::env::var("TCSIM_SEED").ok());
    std::process::exit(code);
}
