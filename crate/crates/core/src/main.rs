fn main() {
    std::process::exit(voxid::run());
}
