fn main() {
    let code = rebnn::cli::run_with(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
