//! Small templated story corpus for smoke runs and tests.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NAMES: &[&str] = &["Lily", "Tom", "Mia", "Ben", "Sue", "Max", "Anna", "Sam", "Zoe", "Leo"];
const ANIMALS: &[&str] = &["cat", "dog", "bird", "fox", "frog", "bunny", "bear", "duck"];
const ADJS: &[&str] = &["little", "happy", "brave", "sleepy", "tiny", "kind", "silly", "big"];
const PLACES: &[&str] = &["park", "garden", "forest", "house", "pond", "hill", "school"];
const THINGS: &[&str] = &["ball", "hat", "box", "kite", "apple", "shell", "rock", "toy"];
const VERBS: &[&str] = &["play", "run", "jump", "sing", "dance", "read", "swim"];
const FEELINGS: &[&str] = &["happy", "sad", "scared", "excited", "tired", "proud"];
const COLORS: &[&str] = &["red", "blue", "green", "yellow", "pink", "white"];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("nonempty word list")
}

fn story(rng: &mut ChaCha8Rng) -> String {
    let name = pick(rng, NAMES);
    let friend = pick(rng, NAMES);
    let animal = pick(rng, ANIMALS);
    let place = pick(rng, PLACES);
    let thing = pick(rng, THINGS);
    let color = pick(rng, COLORS);
    let mut s = format!(
        "Once upon a time, there was a {} {animal} named {name}. {name} liked to {} in the {place}.",
        pick(rng, ADJS),
        pick(rng, VERBS)
    );
    s += &format!(" One day, {name} found a {color} {thing}. {name} was very {}.", pick(rng, FEELINGS));
    for _ in 0..rng.random_range(1..4) {
        let line = match rng.random_range(0..4) {
            0 => format!(" {name} showed the {thing} to {friend}. \"Can we {} with it?\" asked {friend}.", pick(rng, VERBS)),
            1 => format!(" They went to the {} together and saw a {} {}.", pick(rng, PLACES), pick(rng, ADJS), pick(rng, ANIMALS)),
            2 => format!(" The sun was {} and the sky was {}.", pick(rng, &["warm", "bright", "low"]), pick(rng, COLORS)),
            _ => format!(" {friend} felt {} but {name} said, \"Do not worry.\"", pick(rng, FEELINGS)),
        };
        s += &line;
    }
    s += &format!(" At the end of the day, {name} and {friend} were {}. The end.", pick(rng, FEELINGS));
    s
}

/// `n` short children's stories, reproducible from `seed`.
pub fn synthetic_stories(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| story(&mut rng)).collect()
}
