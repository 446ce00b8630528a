fn main() {
    std::process::exit(capsule_wm::cli::run(std::env::args_os()));
}
