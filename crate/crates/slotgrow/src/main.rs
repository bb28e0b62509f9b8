fn main() {
    std::process::exit(slotgrow::run());
}
