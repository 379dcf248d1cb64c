fn main() {
    std::process::exit(ion_readout::cli::run(std::env::args_os()));
}
