use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One `K x D` representation per user, all the same shape, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    k: usize,
    d: usize,
    ids: Vec<String>,
    matrices: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(k: usize, d: usize) -> Self {
        EmbeddingStore {
            k,
            d,
            ids: Vec::new(),
            matrices: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, m: Tensor) -> Result<()> {
        let id = id.into();
        if m.shape() != [self.k, self.d] {
            return Err(Error::contract(format!(
                "representation for {id} is {:?}, store holds {}x{}",
                m.shape(),
                self.k,
                self.d
            )));
        }
        if self.index.contains_key(&id) {
            return Err(Error::data(format!("duplicate user id {id}")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.matrices.push(m);
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrices(&self) -> &[Tensor] {
        &self.matrices
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.index.get(id).map(|&i| &self.matrices[i])
    }

    /// Apply `f` to every stored matrix (e.g. a rotation), keeping ids.
    pub fn map(&self, f: impl Fn(&Tensor) -> Tensor) -> Result<EmbeddingStore> {
        let first = self.matrices.first().map(&f);
        let (k, d) = first.as_ref().map_or((self.k, self.d), |m| (m.rows(), m.cols()));
        let mut out = EmbeddingStore::new(k, d);
        for (id, m) in self.ids.iter().zip(&self.matrices) {
            out.insert(id.clone(), f(m))?;
        }
        Ok(out)
    }

    /// Header `user_id<TAB>K<TAB>D`, then per user the id and the `K*D`
    /// values row-major with 9 significant digits.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("user_id\t{}\t{}\n", self.k, self.d);
        for (id, m) in self.ids.iter().zip(&self.matrices) {
            s.push_str(id);
            for v in m.data() {
                let _ = write!(s, "\t{v:.8e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<EmbeddingStore> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::data("empty embedding file"))?;
        let h: Vec<&str> = header.split('\t').collect();
        let parse_dim = |s: &str| s.parse::<usize>().ok().filter(|&v| v > 0);
        let (k, d) = match h.as_slice() {
            ["user_id", k, d] => match (parse_dim(k), parse_dim(d)) {
                (Some(k), Some(d)) => (k, d),
                _ => return Err(Error::data(format!("bad embedding header {header:?}"))),
            },
            _ => return Err(Error::data(format!("bad embedding header {header:?}"))),
        };
        let mut store = EmbeddingStore::new(k, d);
        for (n, line) in lines.enumerate() {
            let mut fields = line.split('\t');
            let id = fields.next().unwrap_or_default();
            let values: Vec<f64> = fields
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::data(format!("line {}: {e}", n + 2)))?;
            if values.len() != k * d {
                return Err(Error::data(format!("line {}: {} values, expected {}", n + 2, values.len(), k * d)));
            }
            store.insert(id, Tensor::new(k, d, values))?;
        }
        Ok(store)
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path) -> Result<EmbeddingStore> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        EmbeddingStore::from_tsv(&text)
    }
}
