//! Built-in grammars.
//!
//! `desk_grammar` is the default workload: 11 intents, 8 slot types, five
//! of them open with syllable-composed lexicons. Open values are built
//! from per-type syllable banks; the novel lexicons reuse the same banks
//! but only combinations absent from the standard lexicon, so the acoustic
//! model has seen every syllable (and its pieces) without having seen the
//! novel words themselves.

use std::collections::HashSet;

use crate::tensor::SluRng;

use super::Grammar;

const SONG_SYLLABLES: &[&str] = &[
    "lu", "mo", "ra", "ve", "zin", "ka", "so", "ti", "del", "pha", "ny", "qui", "bo", "sha",
    "ree", "go",
];
const NAME_SYLLABLES: &[&str] = &[
    "an", "bel", "cor", "dan", "el", "fin", "gre", "hal", "is", "jo", "kam", "lor", "mi", "nor",
    "ol", "pet", "ros", "sam", "tam", "vic", "wen", "yas",
];
const CITY_SYLLABLES: &[&str] = &[
    "ash", "bridge", "cam", "den", "fair", "glen", "hill", "kings", "lake", "mar", "north",
    "oak", "port", "ton", "ville", "ford", "dale", "west",
];

/// Deterministically composes `count` distinct values from a syllable bank.
/// Single syllables are emitted first so every syllable (and its characters)
/// is guaranteed to appear in the standard lexicon.
fn synth_values(
    bank: &[&str],
    count: usize,
    rng: &mut SluRng,
    taken: &mut HashSet<String>,
    include_singles: bool,
) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    if include_singles {
        for &s in bank {
            if out.len() >= count {
                break;
            }
            if taken.insert(s.to_string()) {
                out.push(s.to_string());
            }
        }
    }
    let mut guard = 0;
    while out.len() < count {
        guard += 1;
        assert!(guard < 100_000, "syllable bank exhausted");
        let syllables = 2 + rng.below(2); // 2 or 3
        let mut v = String::new();
        for _ in 0..syllables {
            v.push_str(bank[rng.below(bank.len())]);
        }
        if taken.insert(v.clone()) {
            out.push(v);
        }
    }
    out
}

fn owned(values: &[&str]) -> Vec<String> {
    values.iter().map(|s| s.to_string()).collect()
}

/// The default desk-scale grammar: 11 intents, 8 slot types (5 open).
pub fn desk_grammar() -> Grammar {
    let mut rng = SluRng::derive(0xDE5C, 0);
    let mut g = Grammar::new();

    let mut taken = HashSet::new();
    let song_train = synth_values(SONG_SYLLABLES, 150, &mut rng, &mut taken, true);
    let song_novel = synth_values(SONG_SYLLABLES, 60, &mut rng, &mut taken, false);
    let playlist_train = synth_values(SONG_SYLLABLES, 70, &mut rng, &mut taken, false);
    let playlist_novel = synth_values(SONG_SYLLABLES, 30, &mut rng, &mut taken, false);

    let mut taken = HashSet::new();
    let artist_train = synth_values(NAME_SYLLABLES, 110, &mut rng, &mut taken, true);
    let artist_novel = synth_values(NAME_SYLLABLES, 45, &mut rng, &mut taken, false);
    let person_train = synth_values(NAME_SYLLABLES, 100, &mut rng, &mut taken, false);
    let person_novel = synth_values(NAME_SYLLABLES, 40, &mut rng, &mut taken, false);

    let mut taken = HashSet::new();
    let city_train = synth_values(CITY_SYLLABLES, 90, &mut rng, &mut taken, true);
    let city_novel = synth_values(CITY_SYLLABLES, 40, &mut rng, &mut taken, false);

    g.add_slot_type("song", song_train, song_novel).unwrap();
    g.add_slot_type("artist", artist_train, artist_novel).unwrap();
    g.add_slot_type("playlist", playlist_train, playlist_novel)
        .unwrap();
    g.add_slot_type(
        "genre",
        owned(&[
            "jazz", "rock", "metal", "pop", "folk", "blues", "techno", "soul",
        ]),
        vec![],
    )
    .unwrap();
    g.add_slot_type("person", person_train, person_novel).unwrap();
    g.add_slot_type("city", city_train, city_novel).unwrap();
    g.add_slot_type(
        "room",
        owned(&["kitchen", "bedroom", "office", "hallway", "garage", "attic"]),
        vec![],
    )
    .unwrap();
    g.add_slot_type(
        "hour",
        owned(&[
            "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
            "eleven", "twelve",
        ]),
        vec![],
    )
    .unwrap();

    g.add_intent(
        "play_song",
        &[
            "play the song {song} for me",
            "play {song} by {artist} now",
            "put on the track {song}",
            "i want to hear {song} today",
        ],
    )
    .unwrap();
    g.add_intent(
        "play_genre",
        &[
            "play some {genre} music please",
            "put on a {genre} station",
            "i feel like hearing {genre} now",
        ],
    )
    .unwrap();
    g.add_intent(
        "add_to_playlist",
        &[
            "add {song} to the playlist {playlist}",
            "put {song} on my {playlist} list",
            "save the track {song} to {playlist}",
        ],
    )
    .unwrap();
    g.add_intent(
        "set_alarm",
        &[
            "set an alarm for {hour} thirty",
            "wake me up at {hour} sharp",
            "set my alarm to {hour} please",
        ],
    )
    .unwrap();
    g.add_intent(
        "weather_query",
        &[
            "what is the weather in {city}",
            "how cold is it in {city} today",
            "give me the forecast for {city}",
        ],
    )
    .unwrap();
    g.add_intent(
        "call_person",
        &[
            "call {person} on the phone",
            "please give {person} a call now",
            "dial {person} for me please",
        ],
    )
    .unwrap();
    g.add_intent(
        "message_person",
        &[
            "send a message to {person}",
            "text {person} that i am late",
            "write to {person} right away",
        ],
    )
    .unwrap();
    g.add_intent(
        "light_on",
        &[
            "turn on the {room} light",
            "switch the {room} lamp on",
            "lights on in the {room} please",
        ],
    )
    .unwrap();
    g.add_intent(
        "light_off",
        &[
            "turn off the {room} light",
            "kill the lights in the {room}",
            "switch the {room} lamp off",
        ],
    )
    .unwrap();
    g.add_intent(
        "volume_up",
        &[
            "turn the volume up a bit",
            "make it louder in here please",
            "crank the sound up now",
        ],
    )
    .unwrap();
    g.add_intent(
        "volume_down",
        &[
            "turn the volume down a notch",
            "make it quieter in here please",
            "lower the sound a little now",
        ],
    )
    .unwrap();

    g.carriers = vec![
        vec!["please".into()],
        vec!["hey".into()],
        vec!["okay".into()],
        vec!["now".into()],
        vec!["could".into(), "you".into()],
    ];
    g
}

/// A deliberately poor grammar (2 templates, tiny closed lexicons) used as
/// the low-entropy contrast case.
pub fn tiny_grammar() -> Grammar {
    let mut g = Grammar::new();
    g.add_slot_type("device", owned(&["fan", "lamp"]), vec![])
        .unwrap();
    g.add_intent("switch_on", &["turn on the {device} now please"])
        .unwrap();
    g.add_intent("switch_off", &["turn off the {device} now please"])
        .unwrap();
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_grammar_is_valid_and_deterministic() {
        let a = desk_grammar();
        let b = desk_grammar();
        a.validate().unwrap();
        assert!(a.intents.len() >= 8);
        assert!(a.slot_types.len() >= 6);
        assert!(a.slot_types.iter().filter(|s| s.is_open()).count() >= 4);
        for (x, y) in a.slot_types.iter().zip(&b.slot_types) {
            assert_eq!(x.values, y.values);
            assert_eq!(x.novel_values, y.novel_values);
        }
    }

    #[test]
    fn novel_lexicons_are_disjoint_from_standard() {
        let g = desk_grammar();
        for st in &g.slot_types {
            let train: HashSet<&String> = st.values.iter().collect();
            for nv in &st.novel_values {
                assert!(!train.contains(nv), "{nv} leaked into {0}", st.name);
            }
        }
    }

    #[test]
    fn templates_have_no_adjacent_same_type_slots() {
        // Adjacent same-label slots merge under run-based assembly, so
        // grammars must never emit them.
        let g = desk_grammar();
        for intent in &g.intents {
            for t in &intent.templates {
                for pair in t.parts.windows(2) {
                    if let (super::super::Part::Slot(a), super::super::Part::Slot(b)) =
                        (&pair[0], &pair[1])
                    {
                        assert_ne!(a, b, "adjacent same-type slots in {}", intent.name);
                    }
                }
            }
        }
    }
}
