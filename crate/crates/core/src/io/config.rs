//! Flat `key = value` text with `[section]` headers and `#` comments.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigDoc {
    pub source_name: String,
    pub sections: Vec<Section>,
}

impl ConfigDoc {
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse {
            source_name: source_name.to_string(),
            line,
            message,
        };
        let mut sections = vec![Section {
            name: String::new(),
            line: 0,
            entries: Vec::new(),
        }];
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            if let Some(rest) = s.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| perr(line, format!("unterminated section header '{s}'")))?
                    .trim();
                if name.is_empty() {
                    return Err(perr(line, "empty section name".into()));
                }
                if sections.iter().any(|sec| sec.name == name) {
                    return Err(perr(line, format!("duplicate section [{name}]")));
                }
                sections.push(Section {
                    name: name.to_string(),
                    line,
                    entries: Vec::new(),
                });
                continue;
            }
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| perr(line, format!("expected 'key = value', got '{s}'")))?;
            let key = k.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(perr(line, format!("malformed key '{key}'")));
            }
            let sec = sections.last_mut().expect("root section");
            if sec.entries.iter().any(|e| e.key == key) {
                return Err(perr(line, format!("duplicate key '{key}'")));
            }
            sec.entries.push(Entry {
                key: key.to_string(),
                value: v.trim().to_string(),
                line,
            });
        }
        if sections[0].entries.is_empty() {
            sections.remove(0);
        }
        Ok(Self {
            source_name: source_name.to_string(),
            sections,
        })
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// Sections whose name starts with `prefix`, in file order, with the
    /// prefix stripped.
    pub fn sections_with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a Section)> + 'a {
        self.sections
            .iter()
            .filter_map(move |s| s.name.strip_prefix(prefix).map(|rest| (rest, s)))
    }

    /// Rejects sections not in `allowed` (exact names or `prefix*`).
    pub fn check_sections(&self, allowed: &[&str]) -> Result<()> {
        for s in &self.sections {
            let ok = allowed.iter().any(|a| match a.strip_suffix('*') {
                Some(p) => s.name.starts_with(p),
                None => s.name == *a,
            });
            if !ok {
                return Err(Error::Parse {
                    source_name: self.source_name.clone(),
                    line: s.line,
                    message: format!("unknown section [{}]", s.name),
                });
            }
        }
        Ok(())
    }

    pub fn reader<'a>(&'a self, section: &'a Section) -> SectionReader<'a> {
        SectionReader {
            source_name: &self.source_name,
            section,
            used: RefCell::new(BTreeSet::new()),
        }
    }
}

/// Typed access to one section; [`SectionReader::finish`] rejects keys that
/// were never read.
pub struct SectionReader<'a> {
    source_name: &'a str,
    section: &'a Section,
    used: RefCell<BTreeSet<String>>,
}

impl SectionReader<'_> {
    fn err(&self, line: usize, message: String) -> Error {
        Error::Parse {
            source_name: self.source_name.to_string(),
            line,
            message,
        }
    }

    pub fn raw(&self, key: &str) -> Option<&Entry> {
        self.used.borrow_mut().insert(key.to_string());
        self.section.entries.iter().find(|e| e.key == key)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).map_err(|err| {
                self.err(
                    e.line,
                    format!("bad value for key '{key}': '{}' ({err})", e.value),
                )
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?.ok_or_else(|| {
            self.err(
                self.section.line,
                format!("missing key '{key}' in [{}]", self.section.name),
            )
        })
    }

    /// Comma-separated list; `a..b` expands an inclusive integer range when
    /// `T` parses from integers. An empty value is an empty list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        let Some(e) = self.raw(key) else {
            return Ok(None);
        };
        let mut out = Vec::new();
        for tok in e.value.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            if let Some((a, b)) = tok.split_once("..") {
                let parse = |s: &str| {
                    s.trim().parse::<i64>().map_err(|err| {
                        self.err(e.line, format!("bad range in key '{key}': '{tok}' ({err})"))
                    })
                };
                let (a, b) = (parse(a)?, parse(b)?);
                if b < a {
                    return Err(self.err(e.line, format!("empty range in key '{key}': '{tok}'")));
                }
                for v in a..=b {
                    out.push(v.to_string().parse::<T>().map_err(|err| {
                        self.err(e.line, format!("bad value in key '{key}': '{v}' ({err})"))
                    })?);
                }
            } else {
                out.push(tok.parse::<T>().map_err(|err| {
                    self.err(e.line, format!("bad value in key '{key}': '{tok}' ({err})"))
                })?);
            }
        }
        Ok(Some(out))
    }

    pub fn finish(self) -> Result<()> {
        let used = self.used.borrow();
        for e in &self.section.entries {
            if !used.contains(&e.key) {
                return Err(self.err(
                    e.line,
                    format!("unknown key '{}' in [{}]", e.key, self.section.name),
                ));
            }
        }
        Ok(())
    }
}

/// Builds config text in the same format.
#[derive(Debug, Default, Clone)]
pub struct ConfigWriter {
    out: String,
}

impl ConfigWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn comment(&mut self, text: &str) -> &mut Self {
        self.out.push_str(&format!("# {text}\n"));
        self
    }

    pub fn section(&mut self, name: &str) -> &mut Self {
        if !self.out.is_empty() {
            self.out.push('\n');
        }
        self.out.push_str(&format!("[{name}]\n"));
        self
    }

    pub fn kv(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.out.push_str(&format!("{key} = {value}\n"));
        self
    }

    pub fn list<T: Display>(&mut self, key: &str, values: &[T]) -> &mut Self {
        let v: Vec<String> = values.iter().map(|x| x.to_string()).collect();
        self.kv(key, v.join(", "))
    }

    pub fn finish(&self) -> String {
        self.out.clone()
    }
}
