//! Interaction datasets: loading, dense re-indexing, side features and the
//! leave-last-two split.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// `userId,movieId,rating,timestamp` with a header row.
    MovielensCsv,
    /// Whitespace-separated `user item timestamp` or
    /// `user item rating timestamp`, no header.
    TsvTriples,
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "movielens_csv" => Ok(DataFormat::MovielensCsv),
            "tsv_triples" => Ok(DataFormat::TsvTriples),
            other => Err(Error::config(format!("unknown data format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionDataset {
    /// Grouped by user, each user's rows in timestamp order.
    pub interactions: Vec<Interaction>,
    /// Raw id of each dense user index.
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// Per-item side features, one row per dense item index.
    #[serde(skip)]
    pub item_features: Option<Array2<f64>>,
    pub duplicates_removed: usize,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Dense indices ordered by raw id: numerically when every id is an
/// integer, lexicographically otherwise.
fn dense_index(raw: &[&str]) -> (Vec<String>, HashMap<String, u32>) {
    let mut ids: Vec<String> = raw
        .iter()
        .map(|s| s.to_string())
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    if ids.iter().all(|s| s.parse::<u64>().is_ok()) {
        ids.sort_by_key(|s| s.parse::<u64>().expect("checked"));
    } else {
        ids.sort();
    }
    let map = ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i as u32))
        .collect();
    (ids, map)
}

impl InteractionDataset {
    /// Builds a dataset from raw `(user, item, timestamp)` rows in file order.
    pub fn from_raw(rows: &[(String, String, i64)]) -> Self {
        let users: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
        let items: Vec<&str> = rows.iter().map(|r| r.1.as_str()).collect();
        let (user_ids, umap) = dense_index(&users);
        let (item_ids, imap) = dense_index(&items);
        let mut seen = HashSet::with_capacity(rows.len());
        let mut interactions = Vec::with_capacity(rows.len());
        for (u, i, t) in rows {
            let x = Interaction {
                user: umap[u],
                item: imap[i],
                timestamp: *t,
            };
            if seen.insert(x) {
                interactions.push(x);
            }
        }
        let duplicates_removed = rows.len() - interactions.len();
        // Stable: equal timestamps keep file order.
        interactions.sort_by_key(|x| (x.user, x.timestamp));
        InteractionDataset {
            interactions,
            user_ids,
            item_ids,
            item_features: None,
            duplicates_removed,
        }
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Each user's rows as a slice of `interactions`.
    pub fn user_histories(&self) -> Vec<&[Interaction]> {
        let mut out = vec![&self.interactions[..0]; self.n_users()];
        let mut start = 0;
        while start < self.interactions.len() {
            let u = self.interactions[start].user;
            let end = start + self.interactions[start..].partition_point(|x| x.user == u);
            out[u as usize] = &self.interactions[start..end];
            start = end;
        }
        out
    }

    /// Writes the raw-id maps as JSON arrays indexed by dense id.
    pub fn save_index_maps(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("user_ids.json"),
            serde_json::to_vec(&self.user_ids)?,
        )?;
        std::fs::write(
            dir.join("item_ids.json"),
            serde_json::to_vec(&self.item_ids)?,
        )?;
        Ok(())
    }
}

/// Reads explicit ratings as implicit positives.
pub fn load_interactions(path: impl AsRef<Path>, format: DataFormat) -> Result<InteractionDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    match format {
        DataFormat::MovielensCsv => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(true)
                .from_reader(text.as_bytes());
            for (i, rec) in reader.records().enumerate() {
                let line = i + 2;
                let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
                if rec.len() != 4 {
                    return Err(parse_err(
                        path,
                        line,
                        format!("expected 4 fields, found {}", rec.len()),
                    ));
                }
                let ts = rec[3].trim().parse::<i64>().map_err(|e| {
                    parse_err(path, line, format!("bad timestamp {:?}: {e}", &rec[3]))
                })?;
                rec[2]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(path, line, format!("bad rating {:?}: {e}", &rec[2])))?;
                rows.push((rec[0].trim().to_string(), rec[1].trim().to_string(), ts));
            }
        }
        DataFormat::TsvTriples => {
            for (i, raw) in text.lines().enumerate() {
                let line = i + 1;
                let fields: Vec<&str> = raw.split_whitespace().collect();
                let ts_field = match fields.len() {
                    0 => continue,
                    3 => fields[2],
                    4 => fields[3],
                    n => {
                        return Err(parse_err(
                            path,
                            line,
                            format!("expected 3 or 4 fields, found {n}"),
                        ))
                    }
                };
                let ts = ts_field.parse::<i64>().map_err(|e| {
                    parse_err(path, line, format!("bad timestamp {ts_field:?}: {e}"))
                })?;
                rows.push((fields[0].to_string(), fields[1].to_string(), ts));
            }
        }
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "no interactions"));
    }
    let ds = InteractionDataset::from_raw(&rows);
    if ds.duplicates_removed > 0 {
        log::warn!(
            "{}: removed {} duplicate interactions",
            path.display(),
            ds.duplicates_removed
        );
    }
    Ok(ds)
}

/// Genre names of the 20M release's `movies.csv`.
pub const MOVIELENS_GENRES: [&str; 20] = [
    "Action",
    "Adventure",
    "Animation",
    "Children",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Fantasy",
    "Film-Noir",
    "Horror",
    "IMAX",
    "Musical",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Thriller",
    "War",
    "Western",
    "(no genres listed)",
];

/// Number of genre flags in the 100K release's `u.item`.
pub const ML100K_GENRES: usize = 19;

/// Genre indicator vectors, one row per dense item id. Reads either the
/// pipe-separated `u.item` (19 flags) or `movies.csv` (20 named genres).
/// Items missing from the file get an all-zero row.
pub fn load_genres(path: impl AsRef<Path>, ds: &InteractionDataset) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    // u.item is Latin-1; only the ASCII fields matter here.
    let text = String::from_utf8_lossy(&bytes);
    let index: HashMap<&str, usize> = ds
        .item_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let dims;
    if text.starts_with("movieId,") {
        dims = MOVIELENS_GENRES.len();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        for (i, rec) in reader.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
            if rec.len() != 3 {
                return Err(parse_err(
                    path,
                    line,
                    format!("expected 3 fields, found {}", rec.len()),
                ));
            }
            let mut v = vec![0.0; dims];
            for g in rec[2].split('|') {
                let j = MOVIELENS_GENRES
                    .iter()
                    .position(|&name| name == g)
                    .ok_or_else(|| parse_err(path, line, format!("unknown genre {g:?}")))?;
                v[j] = 1.0;
            }
            if let Some(&item) = index.get(rec[0].trim()) {
                rows.insert(item, v);
            }
        }
    } else {
        dims = ML100K_GENRES;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.split('|').collect();
            if fields.len() < 5 + dims {
                return Err(parse_err(
                    path,
                    line,
                    format!("expected {} fields, found {}", 5 + dims, fields.len()),
                ));
            }
            let flags = &fields[fields.len() - dims..];
            let v = flags
                .iter()
                .map(|f| match f.trim() {
                    "0" => Ok(0.0),
                    "1" => Ok(1.0),
                    other => Err(parse_err(path, line, format!("bad genre flag {other:?}"))),
                })
                .collect::<Result<Vec<f64>>>()?;
            if let Some(&item) = index.get(fields[0].trim()) {
                rows.insert(item, v);
            }
        }
    }
    let mut out = Array2::zeros((ds.n_items(), dims));
    for (item, v) in rows {
        out.row_mut(item).assign(&ndarray::Array1::from(v));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<Interaction>,
    pub valid: Vec<Interaction>,
    pub test: Vec<Interaction>,
}

/// Per user: all but the last two rows to train, the second-to-last to
/// valid, the last to test. Users with fewer than three rows go entirely to
/// train.
pub fn split_leave_last_two(ds: &InteractionDataset) -> Split {
    let mut split = Split {
        train: Vec::with_capacity(ds.len()),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for h in ds.user_histories() {
        if h.len() < 3 {
            split.train.extend_from_slice(h);
        } else {
            split.train.extend_from_slice(&h[..h.len() - 2]);
            split.valid.push(h[h.len() - 2]);
            split.test.push(h[h.len() - 1]);
        }
    }
    split
}

/// Interaction counts per id over `rows`.
pub fn frequencies(rows: &[Interaction], n_users: usize, n_items: usize) -> (Vec<u64>, Vec<u64>) {
    let mut users = vec![0u64; n_users];
    let mut items = vec![0u64; n_items];
    for x in rows {
        users[x.user as usize] += 1;
        items[x.item as usize] += 1;
    }
    (users, items)
}

/// Two user groups that each interact only with their own half of the
/// items, `per_user` random items apiece. Rank-2 structure, so matrix
/// factorization separates it almost perfectly.
pub fn synthetic_blocks(
    n_users: usize,
    n_items: usize,
    per_user: usize,
    seed: u64,
) -> InteractionDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = n_items / 2;
    let mut rows = Vec::with_capacity(n_users * per_user);
    for u in 0..n_users {
        let (lo, hi) = if u < n_users / 2 {
            (0, half)
        } else {
            (half, n_items)
        };
        let mut pool: Vec<usize> = (lo..hi).collect();
        pool.shuffle(&mut rng);
        for &i in pool.iter().take(per_user) {
            rows.push((u.to_string(), i.to_string(), rng.random_range(0..1_000_000)));
        }
    }
    InteractionDataset::from_raw(&rows)
}
