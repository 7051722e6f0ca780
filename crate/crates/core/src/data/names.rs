/// Words that end a class name and start a descriptive tail.
const PREPOSITIONS: [&str; 14] = [
    "in", "on", "at", "with", "near", "under", "inside", "behind", "beside", "from", "over", "along", "around", "against",
];

const IRREGULAR: [(&str, &str); 14] = [
    ("people", "person"),
    ("men", "man"),
    ("women", "woman"),
    ("children", "child"),
    ("mice", "mouse"),
    ("geese", "goose"),
    ("teeth", "tooth"),
    ("feet", "foot"),
    ("knives", "knife"),
    ("leaves", "leaf"),
    ("loaves", "loaf"),
    ("shelves", "shelf"),
    ("wolves", "wolf"),
    ("halves", "half"),
];

const UNCHANGED: [&str; 10] = [
    "sheep", "fish", "deer", "series", "species", "glasses", "chess", "bus", "grass", "lettuce",
];

/// Singular form of one English noun by rule table.
pub fn singularize(word: &str) -> String {
    let w = word.to_lowercase();
    if let Some(&(_, s)) = IRREGULAR.iter().find(|(p, _)| *p == w) {
        return s.to_string();
    }
    if UNCHANGED.contains(&w.as_str()) || w.len() < 3 {
        return w;
    }
    for (suffix, replacement) in [("ies", "y"), ("sses", "ss"), ("xes", "x"), ("zes", "z"), ("ches", "ch"), ("shes", "sh")] {
        if let Some(stem) = w.strip_suffix(suffix) {
            if !stem.is_empty() {
                return format!("{stem}{replacement}");
            }
        }
    }
    if let Some(stem) = w.strip_suffix("oes") {
        // tomatoes, potatoes; but shoes, toes
        if stem.len() > 3 {
            return format!("{stem}o");
        }
    }
    if w.ends_with('s') && !w.ends_with("ss") && !w.ends_with("us") && !w.ends_with("is") {
        return w[..w.len() - 1].to_string();
    }
    w
}

/// Reduces a descriptive label to a singular class name: lowercases, drops a
/// leading "the", cuts at the first preposition and singularizes the last
/// word. `"the donuts in the donut tray"` becomes `"donut"`.
pub fn normalize_class_name(raw: &str) -> String {
    let lower = raw.to_lowercase();
    let mut words: Vec<&str> = lower.split_whitespace().collect();
    while words.first() == Some(&"the") {
        words.remove(0);
    }
    if let Some(cut) = words.iter().position(|w| PREPOSITIONS.contains(w)) {
        if cut > 0 {
            words.truncate(cut);
        }
    }
    match words.split_last() {
        None => String::new(),
        Some((last, head)) => {
            let mut out: Vec<String> = head.iter().map(|w| w.to_string()).collect();
            out.push(singularize(last));
            out.join(" ")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn donut_example() {
        assert_eq!(normalize_class_name("the donuts in the donut tray"), "donut");
    }

    #[test]
    fn rule_table() {
        for (p, s) in [
            ("strawberries", "strawberry"),
            ("boxes", "box"),
            ("peaches", "peach"),
            ("glasses", "glasses"),
            ("tomatoes", "tomato"),
            ("shoes", "shoe"),
            ("cars", "car"),
            ("sheep", "sheep"),
            ("knives", "knife"),
            ("people", "person"),
            ("bus", "bus"),
            ("lego", "lego"),
        ] {
            assert_eq!(singularize(p), s, "{p}");
        }
        assert_eq!(normalize_class_name("The Yellow Lego Studs"), "yellow lego stud");
        assert_eq!(normalize_class_name("  "), "");
    }
}
