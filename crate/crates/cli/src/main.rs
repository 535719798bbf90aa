fn main() {
    std::process::exit(anobfn_cli::run(std::env::args_os()));
}
