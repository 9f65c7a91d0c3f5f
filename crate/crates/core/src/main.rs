fn main() {
    std::process::exit(miniprof::cli::main(std::env::args_os()));
}
