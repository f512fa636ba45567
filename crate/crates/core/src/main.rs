fn main() {
    std::process::exit(topicflow::cli::run(std::env::args_os()));
}
