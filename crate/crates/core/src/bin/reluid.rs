fn main() {
    std::process::exit(relu_ident::cli::run_from(std::env::args_os()));
}
