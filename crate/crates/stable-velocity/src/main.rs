use stable_velocity::cli;

fn main() {
    std::process::exit(cli::run());
}
