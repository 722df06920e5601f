//! Bundled word lists: synthetic class names, hand-crafted templates and the
//! default tokenizer corpus.

/// Placeholder substituted by a class name inside a template.
pub const CLASS_SLOT: &str = "[CLASS]";

/// Default hand-crafted template for generic objects.
pub const DEFAULT_TEMPLATE: &str = "a photo of a [CLASS].";

/// Phrase used for manual context initialization.
pub const MANUAL_INIT_PHRASE: &str = "a photo of a";

/// Ensemble templates covering different scale, view and abstraction.
pub const ENSEMBLE_TEMPLATES: &[&str] = &[
    "itap of a [CLASS].",
    "a bad photo of the [CLASS].",
    "a origami [CLASS].",
    "a photo of the large [CLASS].",
    "a [CLASS] in a video game.",
    "art of the [CLASS].",
    "a photo of the small [CLASS].",
];

/// Per-domain templates in the usual prompt-engineering style.
pub const DOMAIN_TEMPLATES: &[&str] = &[
    "a photo of a [CLASS].",
    "a photo of a [CLASS], a type of pet.",
    "a photo of a [CLASS], a type of flower.",
    "a photo of [CLASS], a type of food.",
    "a photo of a [CLASS], a type of aircraft.",
    "[CLASS] texture.",
    "a centered satellite photo of [CLASS].",
    "a photo of a person doing [CLASS].",
];

/// Class names for synthetic datasets, in the order they are assigned.
pub const CLASS_WORDS: &[&str] = &[
    "dog", "cat", "car", "bird", "horse", "ship", "truck", "frog", "deer", "plane", "apple", "tiger", "lion",
    "shark", "whale", "train", "chair", "table", "clock", "lamp", "rose", "tulip", "daisy", "pizza", "bread",
    "cake", "river", "forest", "mountain", "beach", "bridge", "tower", "castle", "violin", "guitar", "piano",
    "rabbit", "turtle", "eagle", "owl", "bee", "spider", "snake", "bear", "wolf", "fox", "camel", "zebra",
];

/// Filler sentences so the default corpus supports a few hundred merges.
const FILLER: &[&str] = &[
    "there is a small dog sitting on the grass near the river",
    "the large cat sleeps under a wooden chair in the kitchen",
    "a red car drives across the old stone bridge at night",
    "birds fly over the forest while the sun sets behind the mountain",
    "a bright photo of the beach with waves and white sand",
    "this is a blurry picture of a black horse running in a field",
    "a cropped image of a ship sailing on the blue ocean",
    "close up view of a green frog resting on a leaf",
    "a painting of a castle tower standing on a hill",
    "a drawing of a guitar and a violin leaning against a piano",
    "someone is holding a slice of pizza and a piece of cake",
    "a pile of fresh bread on the table next to a clock",
    "a rendering of a train arriving at the station in winter",
    "a tattoo of a rose, a tulip and a daisy in a garden",
    "a sculpture of a lion and a tiger made of bronze",
    "a cartoon whale and a shark swimming in deep water",
    "an embroidered owl, an eagle and a bee on white cloth",
    "a plastic toy truck, a plane and a camel for children",
    "a rabbit and a turtle racing along a dusty road",
    "a spider crawls near a snake hiding between the rocks",
    "a brown bear, a grey wolf and a red fox in the snow",
    "a zebra and a deer graze together in the wild",
    "a dark photo of the lamp in a quiet room",
    "a jpeg corrupted photo of an apple on a plate",
    "a pixelated photo of the object, a type of thing",
    "a satellite photo of farmland, highway and residential buildings",
    "a person doing yoga, playing tennis or riding a bike",
    "a bubbly, dotted, striped or woven texture close up",
];

/// Corpus used to build the default desk vocabulary.
pub fn default_corpus() -> Vec<String> {
    let mut lines: Vec<String> = Vec::new();
    for word in CLASS_WORDS {
        for template in ENSEMBLE_TEMPLATES.iter().chain(DOMAIN_TEMPLATES) {
            lines.push(fill_template(template, word));
        }
    }
    lines.extend(FILLER.iter().map(|s| s.to_string()));
    lines
}

/// Replaces every class slot in `template` with `class_name`.
pub fn fill_template(template: &str, class_name: &str) -> String {
    template.replace(CLASS_SLOT, class_name)
}
