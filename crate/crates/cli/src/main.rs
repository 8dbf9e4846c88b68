fn main() {
    std::process::exit(tgcnet_cli::run(std::env::args_os()));
}
