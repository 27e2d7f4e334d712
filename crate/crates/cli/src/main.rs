fn main() {
    std::process::exit(amp_sim::run(std::env::args_os()));
}
