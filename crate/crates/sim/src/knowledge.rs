//! Dolev-Yao deduction over the concrete values of one simulated run.
//!
//! Every 256-bit value is mapped to a term: either an *atom* (a hash output,
//! PUF response, random draw, or anything else opaque) or an XOR of atoms,
//! reconstructed from the XOR log the honest parties produced. Knowledge is
//! the GF(2) span of known terms over atoms, so XOR cancels exactly and an
//! observed value never reveals anything about atoms it doesn't contain.
//!
//! Hash, PUF and decryption rules fire over the records of the run. That is
//! sufficient to decide whether a run value is derivable: a hash or PUF
//! query on an input no honest party used yields a fresh atom that, under
//! the free-symbol model, equals no value in the run.

use std::collections::{BTreeSet, HashMap};

use iod_core::crypto::{AsymPublicKey, Block256, Id32};
use iod_core::meter::Audit;

pub const DEFAULT_DEPTH: usize = 6;

#[derive(Clone, Debug, PartialEq, Eq)]
struct BitVec(Vec<u64>);

impl BitVec {
    fn zero(words: usize) -> Self {
        BitVec(vec![0; words])
    }

    fn unit(i: usize, words: usize) -> Self {
        let mut v = Self::zero(words);
        v.0[i / 64] |= 1 << (i % 64);
        v
    }

    fn grow(&mut self, words: usize) {
        if self.0.len() < words {
            self.0.resize(words, 0);
        }
    }

    fn xor_assign(&mut self, o: &BitVec) {
        self.grow(o.0.len());
        for (a, b) in self.0.iter_mut().zip(&o.0) {
            *a ^= b;
        }
    }

    fn get(&self, i: usize) -> bool {
        self.0.get(i / 64).is_some_and(|w| w >> (i % 64) & 1 == 1)
    }

    fn lowest(&self) -> Option<usize> {
        self.0
            .iter()
            .enumerate()
            .find(|(_, w)| **w != 0)
            .map(|(i, w)| i * 64 + w.trailing_zeros() as usize)
    }
}

#[derive(Clone, Debug, Default)]
struct Span {
    /// Rows keyed by pivot; each row has no bit at any other row's pivot.
    rows: Vec<(usize, BitVec)>,
}

impl Span {
    fn reduce(&self, v: &BitVec) -> BitVec {
        let mut v = v.clone();
        for (p, row) in &self.rows {
            if v.get(*p) {
                v.xor_assign(row);
            }
        }
        v
    }

    fn contains(&self, v: &BitVec) -> bool {
        self.reduce(v).lowest().is_none()
    }

    /// Returns true when `v` enlarged the span.
    fn insert(&mut self, v: &BitVec) -> bool {
        let r = self.reduce(v);
        let Some(p) = r.lowest() else {
            return false;
        };
        for (_, row) in self.rows.iter_mut() {
            if row.get(p) {
                row.xor_assign(&r);
            }
        }
        self.rows.push((p, r));
        true
    }
}

#[derive(Clone, Debug)]
struct HashRule {
    x: Vec<u8>,
    y: Vec<u8>,
    out: Block256,
}

#[derive(Clone, Debug)]
struct PufRule {
    device: Id32,
    challenge: Block256,
    response: Block256,
}

#[derive(Clone, Debug)]
struct AsymRule {
    recipient: AsymPublicKey,
    plaintext: Block256,
}

/// Result of one saturation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Closure {
    pub rounds: usize,
    /// True when the depth bound stopped saturation early.
    pub bounded: bool,
}

#[derive(Clone, Debug, Default)]
pub struct KnowledgeBase {
    atoms: HashMap<Block256, usize>,
    xor_defs: HashMap<Block256, (Block256, Block256)>,
    terms: HashMap<Block256, BitVec>,
    span: Span,
    hashes: Vec<HashRule>,
    pufs: Vec<PufRule>,
    asym: Vec<AsymRule>,
    fired: BTreeSet<(u8, usize)>,
    puf_oracles: BTreeSet<Id32>,
    private_keys: BTreeSet<[u8; 32]>,
}

impl KnowledgeBase {
    /// Builds the term structure from the honest parties' audit trails.
    pub fn from_audit(audit: &Audit) -> Self {
        let mut kb = KnowledgeBase::default();
        let atom = |kb: &mut KnowledgeBase, v: Block256| {
            let n = kb.atoms.len();
            kb.atoms.entry(v).or_insert(n);
        };
        for r in &audit.randoms {
            atom(&mut kb, *r);
        }
        for h in &audit.hashes {
            atom(&mut kb, h.out);
        }
        for p in &audit.pufs {
            atom(&mut kb, p.response);
        }
        for x in &audit.xors {
            if !kb.atoms.contains_key(&x.out) {
                kb.xor_defs.entry(x.out).or_insert((x.a, x.b));
            }
        }
        kb.hashes = audit
            .hashes
            .iter()
            .map(|h| HashRule {
                x: h.x.clone(),
                y: h.y.clone(),
                out: h.out,
            })
            .collect();
        kb.pufs = audit
            .pufs
            .iter()
            .map(|p| PufRule {
                device: p.device,
                challenge: p.challenge,
                response: p.response,
            })
            .collect();
        kb.asym = audit
            .encryptions
            .iter()
            .map(|a| AsymRule {
                recipient: a.recipient,
                plaintext: a.plaintext,
            })
            .collect();
        kb
    }

    fn words(&self) -> usize {
        self.atoms.len().div_ceil(64).max(1)
    }

    fn term(&mut self, v: &Block256) -> BitVec {
        let mut visiting = BTreeSet::new();
        self.term_inner(v, &mut visiting)
    }

    fn term_inner(&mut self, v: &Block256, visiting: &mut BTreeSet<Block256>) -> BitVec {
        if let Some(t) = self.terms.get(v) {
            return t.clone();
        }
        let t = if *v == Block256::ZERO {
            BitVec::zero(self.words())
        } else if let Some(&i) = self.atoms.get(v) {
            BitVec::unit(i, self.words())
        } else if let Some((a, b)) = self.xor_defs.get(v).copied() {
            assert!(visiting.insert(*v), "cyclic XOR provenance for {v}");
            let mut t = self.term_inner(&a, visiting);
            t.xor_assign(&self.term_inner(&b, visiting));
            visiting.remove(v);
            t
        } else {
            // opaque value from outside the audited computations
            let n = self.atoms.len();
            self.atoms.insert(*v, n);
            BitVec::unit(n, self.words())
        };
        self.terms.insert(*v, t.clone());
        t
    }

    /// Adds an observed or revealed value. Returns true if it was new.
    pub fn learn(&mut self, v: Block256) -> bool {
        let t = self.term(&v);
        self.span.insert(&t)
    }

    pub fn knows(&mut self, v: &Block256) -> bool {
        let t = self.term(v);
        self.span.contains(&t)
    }

    fn knows_bytes(&mut self, b: &[u8]) -> bool {
        match b.len() {
            // ids and tag bytes are public
            1 | 4 => true,
            32 => self.knows(&Block256(b.try_into().expect("32 bytes"))),
            _ => false,
        }
    }

    pub fn grant_puf_oracle(&mut self, device: Id32) {
        self.puf_oracles.insert(device);
    }

    pub fn grant_private_key(&mut self, pk: AsymPublicKey) {
        self.private_keys.insert(pk.0);
    }

    /// Applies the hash, PUF and decryption rules until nothing new is
    /// learned or `depth` rounds have run. `None` runs to a fixpoint.
    pub fn close(&mut self, depth: Option<usize>) -> Closure {
        let mut rounds = 0;
        loop {
            if depth.is_some_and(|d| rounds >= d) {
                let more = self.round(true);
                return Closure {
                    rounds,
                    bounded: more,
                };
            }
            rounds += 1;
            if !self.round(false) {
                return Closure {
                    rounds,
                    bounded: false,
                };
            }
        }
    }

    /// One pass over all rules. With `probe`, only reports whether any rule
    /// would fire.
    fn round(&mut self, probe: bool) -> bool {
        let mut learned = Vec::new();
        for i in 0..self.hashes.len() {
            if self.fired.contains(&(0, i)) {
                continue;
            }
            let (x, y, out) = {
                let h = &self.hashes[i];
                (h.x.clone(), h.y.clone(), h.out)
            };
            if self.knows_bytes(&x) && self.knows_bytes(&y) {
                learned.push(((0, i), out));
            }
        }
        for i in 0..self.pufs.len() {
            if self.fired.contains(&(1, i)) {
                continue;
            }
            let p = self.pufs[i].clone();
            if self.puf_oracles.contains(&p.device) && self.knows(&p.challenge) {
                learned.push(((1, i), p.response));
            }
        }
        for i in 0..self.asym.len() {
            if self.fired.contains(&(2, i)) {
                continue;
            }
            if self.private_keys.contains(&self.asym[i].recipient.0) {
                learned.push(((2, i), self.asym[i].plaintext));
            }
        }
        if probe {
            let mut any = false;
            for (_, v) in &learned {
                any |= !self.knows(v);
            }
            return any;
        }
        let mut grew = false;
        for (key, v) in learned {
            self.fired.insert(key);
            grew |= self.learn(v);
        }
        grew
    }
}
