fn main() {
    std::process::exit(moe_lab::cli::run(std::env::args_os()));
}
