fn main() {
    std::process::exit(warpgeo_cli::run(std::env::args_os()));
}
