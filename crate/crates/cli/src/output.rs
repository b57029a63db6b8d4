use serde::Serialize;

/// Prints result lines either as text or, with `--json`, as one JSON object
/// per line carrying a `record` field naming its kind.
pub struct Output {
    json: bool,
}

impl Output {
    pub fn new(json: bool) -> Self {
        Self { json }
    }

    pub fn is_json(&self) -> bool {
        self.json
    }

    pub fn emit<T: Serialize>(&self, kind: &str, record: &T, text: impl FnOnce() -> String) {
        if self.json {
            let mut value = serde_json::to_value(record).expect("output records serialize");
            match value.as_object_mut() {
                Some(obj) => {
                    obj.insert("record".into(), kind.into());
                }
                None => value = serde_json::json!({ "record": kind, "value": value }),
            }
            println!("{value}");
        } else {
            println!("{}", text());
        }
    }

    /// Text-only line, suppressed in JSON mode.
    pub fn note(&self, text: impl FnOnce() -> String) {
        if !self.json {
            println!("{}", text());
        }
    }
}

pub fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_owned(), |x| format!("{x:.digits$}"))
}
