//! Minimal RFC-4180 CSV emission: header row, CRLF-free LF lines, fields
//! quoted only when needed.

pub struct CsvWriter {
    columns: usize,
    out: String,
}

impl CsvWriter {
    pub fn new(header: &[&str]) -> Self {
        let mut w = CsvWriter {
            columns: header.len(),
            out: String::new(),
        };
        w.push_row(header.iter().map(|s| s.to_string()));
        w
    }

    pub fn row<I: IntoIterator<Item = String>>(&mut self, fields: I) {
        self.push_row(fields);
    }

    fn push_row<I: IntoIterator<Item = String>>(&mut self, fields: I) {
        let mut count = 0;
        for (i, field) in fields.into_iter().enumerate() {
            if i > 0 {
                self.out.push(',');
            }
            self.out.push_str(&escape(&field));
            count += 1;
        }
        assert_eq!(count, self.columns, "csv row width mismatch");
        self.out.push('\n');
    }

    pub fn finish(self) -> String {
        self.out
    }
}

fn escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Splits a CSV body into rows of fields; used by tests and the determinism
/// comparisons. Handles quoted fields.
pub fn parse(text: &str) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for line in text.lines() {
        let mut fields = Vec::new();
        let mut cur = String::new();
        let mut in_quotes = false;
        let mut chars = line.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                '"' if in_quotes => {
                    if chars.peek() == Some(&'"') {
                        cur.push('"');
                        chars.next();
                    } else {
                        in_quotes = false;
                    }
                }
                '"' => in_quotes = true,
                ',' if !in_quotes => {
                    fields.push(std::mem::take(&mut cur));
                }
                c => cur.push(c),
            }
        }
        fields.push(cur);
        rows.push(fields);
    }
    rows
}

/// Compare two CSV bodies for identity, ignoring the named columns (the
/// wall-clock ones, which are legitimately non-deterministic).
pub fn equal_ignoring(a: &str, b: &str, ignored: &[&str]) -> bool {
    let ra = parse(a);
    let rb = parse(b);
    if ra.len() != rb.len() || ra.is_empty() {
        return ra == rb;
    }
    let header = &ra[0];
    if header != &rb[0] {
        return false;
    }
    let skip: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, name)| ignored.contains(&name.as_str()))
        .map(|(i, _)| i)
        .collect();
    for (row_a, row_b) in ra.iter().zip(rb.iter()).skip(1) {
        if row_a.len() != row_b.len() {
            return false;
        }
        for i in 0..row_a.len() {
            if skip.contains(&i) {
                continue;
            }
            if row_a[i] != row_b[i] {
                return false;
            }
        }
    }
    true
}
