fn main() {
    std::process::exit(clip3d_ad::cli::run_command(std::env::args_os()));
}
