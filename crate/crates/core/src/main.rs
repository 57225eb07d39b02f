fn main() {
    std::process::exit(oui_lab::cli::run(std::env::args_os()));
}
