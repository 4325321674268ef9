fn main() {
    env_logger::init();
    std::process::exit(swep::cli::run_command(std::env::args_os()));
}
