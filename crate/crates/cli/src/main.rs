fn main() {
    println!("webhc");
}
