fn main() {
    let code = agflow::cli::run(std::env::args_os(), std::env::vars().collect());
    std::process::exit(code);
}
