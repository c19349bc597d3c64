//! Machine-translation clients.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::languages::mix_languages;
use crate::error::{Error, Result};

pub trait MtClient: Send + Sync {
    /// Translates every text; the output has the same length and order.
    fn translate(&self, texts: &[String], src: &str, tgt: &str) -> Result<Vec<String>>;

    fn supported_languages(&self) -> BTreeSet<String>;
}

fn all_targets() -> BTreeSet<String> {
    mix_languages().into_iter().map(str::to_string).collect()
}

/// Deterministic stand-in: returns each text with ` [tgt]` appended.
#[derive(Debug, Clone, Default)]
pub struct MockMt;

impl MockMt {
    pub fn tag(text: &str, tgt: &str) -> String {
        format!("{text} [{tgt}]")
    }
}

impl MtClient for MockMt {
    fn translate(&self, texts: &[String], _src: &str, tgt: &str) -> Result<Vec<String>> {
        Ok(texts.iter().map(|t| Self::tag(t, tgt)).collect())
    }

    fn supported_languages(&self) -> BTreeSet<String> {
        all_targets()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MtCall {
    pub texts: Vec<String>,
    pub src: String,
    pub tgt: String,
}

/// Records every request before forwarding it.
pub struct SpyMt<C> {
    inner: C,
    calls: Mutex<Vec<MtCall>>,
}

impl<C: MtClient> SpyMt<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<MtCall> {
        self.calls.lock().expect("spy lock").clone()
    }

    /// Every text ever sent for translation.
    pub fn seen_texts(&self) -> Vec<String> {
        self.calls().into_iter().flat_map(|c| c.texts).collect()
    }
}

impl<C: MtClient> MtClient for SpyMt<C> {
    fn translate(&self, texts: &[String], src: &str, tgt: &str) -> Result<Vec<String>> {
        self.calls.lock().expect("spy lock").push(MtCall {
            texts: texts.to_vec(),
            src: src.to_string(),
            tgt: tgt.to_string(),
        });
        self.inner.translate(texts, src, tgt)
    }

    fn supported_languages(&self) -> BTreeSet<String> {
        self.inner.supported_languages()
    }
}

type CacheKey = (String, String, String);

/// Memoizes translations; uncached texts go to the inner client as one
/// sorted, deduplicated batch so request contents do not depend on call
/// order.
pub struct CachingMt<'c> {
    inner: &'c dyn MtClient,
    batch_size: usize,
    cache: Mutex<BTreeMap<CacheKey, String>>,
}

impl<'c> CachingMt<'c> {
    pub fn new(inner: &'c dyn MtClient, batch_size: usize) -> Self {
        Self {
            inner,
            batch_size: batch_size.max(1),
            cache: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl MtClient for CachingMt<'_> {
    fn translate(&self, texts: &[String], src: &str, tgt: &str) -> Result<Vec<String>> {
        let key = |t: &String| (src.to_string(), tgt.to_string(), t.clone());
        let missing: BTreeSet<&String> = {
            let cache = self.cache.lock().expect("cache lock");
            texts.iter().filter(|t| !cache.contains_key(&key(t))).collect()
        };
        let missing: Vec<String> = missing.into_iter().cloned().collect();
        for chunk in missing.chunks(self.batch_size) {
            let out = self.inner.translate(chunk, src, tgt)?;
            if out.len() != chunk.len() {
                return Err(Error::Translation(format!(
                    "sent {} texts, received {} translations",
                    chunk.len(),
                    out.len()
                )));
            }
            let mut cache = self.cache.lock().expect("cache lock");
            for (t, tr) in chunk.iter().zip(out) {
                cache.insert(key(t), tr);
            }
        }
        let cache = self.cache.lock().expect("cache lock");
        Ok(texts.iter().map(|t| cache[&key(t)].clone()).collect())
    }

    fn supported_languages(&self) -> BTreeSet<String> {
        self.inner.supported_languages()
    }
}

#[derive(Serialize)]
struct TranslateRequest<'a> {
    texts: &'a [String],
    src: &'a str,
    tgt: &'a str,
}

#[derive(Deserialize)]
struct TranslateResponse {
    translations: Vec<String>,
}

/// Client for a translation service speaking
/// `POST {base}/translate {"texts", "src", "tgt"} -> {"translations"}`.
pub struct HttpMt {
    url: String,
    client: reqwest::blocking::Client,
    retries: usize,
    languages: BTreeSet<String>,
}

impl HttpMt {
    pub fn new(base: &str, timeout: Duration, retries: usize) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Translation(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            url: format!("{}/translate", base.trim_end_matches('/')),
            client,
            retries,
            languages: all_targets(),
        })
    }

    pub fn with_languages(mut self, languages: BTreeSet<String>) -> Self {
        self.languages = languages;
        self
    }

    fn attempt(&self, texts: &[String], src: &str, tgt: &str) -> std::result::Result<Vec<String>, String> {
        let resp = self
            .client
            .post(&self.url)
            .json(&TranslateRequest { texts, src, tgt })
            .send()
            .map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("HTTP {status}"));
        }
        let body: TranslateResponse = resp.json().map_err(|e| e.to_string())?;
        if body.translations.len() != texts.len() {
            return Err(format!(
                "sent {} texts, received {} translations",
                texts.len(),
                body.translations.len()
            ));
        }
        Ok(body.translations)
    }
}

impl MtClient for HttpMt {
    fn translate(&self, texts: &[String], src: &str, tgt: &str) -> Result<Vec<String>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let mut last = String::new();
        for attempt in 0..=self.retries {
            match self.attempt(texts, src, tgt) {
                Ok(out) => return Ok(out),
                Err(e) => {
                    log::warn!("translation attempt {} to `{tgt}` failed: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(Error::Translation(format!(
            "{} failed after {} attempt(s): {last}",
            self.url,
            self.retries + 1
        )))
    }

    fn supported_languages(&self) -> BTreeSet<String> {
        self.languages.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn mock_tags_text() {
        let out = MockMt.translate(&strings(&["caption"]), "en", "fr").unwrap();
        assert_eq!(out, vec!["caption [fr]"]);
        assert!(MockMt.supported_languages().contains("fr"));
    }

    #[test]
    fn cache_batches_and_dedups() {
        let spy = SpyMt::new(MockMt);
        let cache = CachingMt::new(&spy, 2);
        let out = cache.translate(&strings(&["b", "a", "b", "c"]), "en", "de").unwrap();
        assert_eq!(out, strings(&["b [de]", "a [de]", "b [de]", "c [de]"]));
        cache.translate(&strings(&["a"]), "en", "de").unwrap();
        let calls = spy.calls();
        assert_eq!(calls.len(), 2);
        assert_eq!(calls[0].texts, strings(&["a", "b"]));
        assert_eq!(calls[1].texts, strings(&["c"]));
        assert_eq!(cache.len(), 3);
    }

    /// Serves `fail_first` 500 responses, then echoes texts uppercased.
    fn serve(fail_first: usize) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let mut stream = stream.unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let n = counter.fetch_add(1, Ordering::SeqCst);
                let (status, payload) = if n < fail_first {
                    ("500 Internal Server Error", "{}".to_string())
                } else {
                    let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
                    let out: Vec<String> = req["texts"]
                        .as_array()
                        .unwrap()
                        .iter()
                        .map(|t| {
                            format!(
                                "{}@{}",
                                t.as_str().unwrap().to_uppercase(),
                                req["tgt"].as_str().unwrap()
                            )
                        })
                        .collect();
                    ("200 OK", serde_json::json!({ "translations": out }).to_string())
                };
                let resp = format!(
                    "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{payload}",
                    payload.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}"), hits)
    }

    #[test]
    fn http_client_retries_then_succeeds() {
        let (url, hits) = serve(2);
        let client = HttpMt::new(&url, Duration::from_secs(5), 2).unwrap();
        let out = client.translate(&strings(&["hi", "cat"]), "en", "de").unwrap();
        assert_eq!(out, strings(&["HI@de", "CAT@de"]));
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn http_client_gives_up_after_retries() {
        let (url, hits) = serve(usize::MAX);
        let client = HttpMt::new(&url, Duration::from_secs(5), 1).unwrap();
        let err = client.translate(&strings(&["hi"]), "en", "de").unwrap_err();
        assert!(matches!(err, Error::Translation(_)));
        assert_eq!(hits.load(Ordering::SeqCst), 2);
    }
}
