//! Corpus generation, storage and loading.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::SynthConfig;
use super::features::FeatureSynth;
use super::lexgen::{gen_lexicon, EntityInfo, EntityKind, SynthLexicon};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::textproc::{
    build_vocab, parse_lexicon, read_catalog_file, write_catalog_file, Lexicon, PhonemeInventory,
    Vocab, UNK_ID,
};

const PERSON_VERBS: &[&str] = &["call", "message", "text", "phone"];
const SUFFIXES: &[&str] = &["", "now", "today", "tonight", "please"];
const TIMES: &[&str] = &["now", "today", "tomorrow", "tonight"];
const GENRES: &[&str] = &["jazz", "rock", "pop", "music", "news"];
const NUMBERS: &[&str] = &["one", "two", "three", "five", "ten"];
const APPLIANCES: &[&str] = &["light", "lamp", "fan", "radio"];
/// Device carriers never used by any training split.
const DEVICE_CARRIERS: &[(&str, &str)] = &[
    ("turn on the", ""),
    ("turn off the", ""),
    ("switch on", ""),
    ("switch off", ""),
    ("start the", ""),
    ("stop the", "now"),
    ("open", "please"),
    ("dim the", "tonight"),
];
const RESAMPLE_TRIES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainBase,
    TrainAdapter,
    TestGeneral,
    TestEntity,
    TestDevice,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::TrainBase,
        Split::TrainAdapter,
        Split::TestGeneral,
        Split::TestEntity,
        Split::TestDevice,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::TrainBase => "train_base",
            Split::TrainAdapter => "train_adapter",
            Split::TestGeneral => "test_general",
            Split::TestEntity => "test_entity",
            Split::TestDevice => "test_device",
        }
    }

    pub fn is_test(self) -> bool {
        matches!(
            self,
            Split::TestGeneral | Split::TestEntity | Split::TestDevice
        )
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "general")]
    General,
    #[serde(rename = "personalized-entity")]
    Entity,
    #[serde(rename = "device-name")]
    Device,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub transcript: String,
    /// Half-open word-index ranges of entity mentions.
    pub spans: Vec<(usize, usize)>,
    /// Catalog id; training utterances get catalogs at training time.
    pub catalog: Option<String>,
    pub domain: Domain,
    /// The spoken entity word, if any.
    pub entity: Option<String>,
    /// Whether the spoken entity reading departs from its spelling.
    pub irregular: bool,
    pub targets: Vec<usize>,
    /// T×D; T = frames per phoneme × spoken symbols (phonemes, inter-word
    /// silences and the trailing silence).
    pub features: Tensor,
}

impl Utterance {
    pub fn words(&self) -> Vec<&str> {
        self.transcript.split_whitespace().collect()
    }
}

#[derive(Serialize, Deserialize)]
struct FeatRef {
    file: String,
    offset: u64,
    frames: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    transcript: String,
    spans: Vec<(usize, usize)>,
    catalog: Option<String>,
    domain: Domain,
    entity: Option<String>,
    irregular: bool,
    targets: Vec<usize>,
    feats: FeatRef,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub cfg: SynthConfig,
    pub inventory: PhonemeInventory,
    /// Catalog-eligible words and their pronunciations.
    pub lexicon: Lexicon,
    pub vocab: Vocab,
    pub entities: Vec<EntityInfo>,
    pub splits: BTreeMap<Split, Vec<Utterance>>,
    /// Catalog id → entity surfaces.
    pub catalogs: BTreeMap<String, Vec<String>>,
    /// Entities that occur exactly once in the entity test set.
    pub rare: Vec<String>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[Utterance] {
        self.splits.get(&s).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn catalog(&self, id: &str) -> Result<&[String]> {
        self.catalogs
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Input(format!("missing catalog {id:?}")))
    }

    pub fn entities_of(&self, kind: EntityKind) -> impl Iterator<Item = &EntityInfo> {
        self.entities.iter().filter(move |e| e.kind == kind)
    }
}

/// A sentence under construction: words with the pronunciation to speak.
struct Draft {
    words: Vec<(String, Vec<usize>)>,
    spans: Vec<(usize, usize)>,
    entity: Option<String>,
    irregular: bool,
    domain: Domain,
    catalog: Option<String>,
}

impl Draft {
    fn transcript(&self) -> String {
        self.words
            .iter()
            .map(|(w, _)| w.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

struct Gen<'a> {
    lex: &'a SynthLexicon,
    rng: ChaCha8Rng,
}

impl Gen<'_> {
    fn common(&self, text: &str) -> Result<Vec<(String, Vec<usize>)>> {
        text.split_whitespace()
            .map(|w| {
                self.lex
                    .common
                    .get(w)
                    .map(|p| (w.to_string(), p.clone()))
                    .ok_or_else(|| {
                        Error::Generation(format!("template word {w:?} has no pronunciation"))
                    })
            })
            .collect()
    }

    fn filler(&mut self) -> (String, Vec<usize>) {
        self.lex.fillers.choose(&mut self.rng).unwrap().clone()
    }

    fn pick<'s>(&mut self, xs: &[&'s str]) -> &'s str {
        xs.choose(&mut self.rng).unwrap()
    }

    /// Carrier around a name slot: (prefix words, name, suffix words).
    fn person_sentence(
        &mut self,
        name: (String, Vec<usize>),
        domain: Domain,
        irregular: bool,
    ) -> Result<Draft> {
        let verb = self.pick(PERSON_VERBS);
        let suffix = self.pick(SUFFIXES);
        self.framed(verb, name, suffix, domain, irregular)
    }

    fn framed(
        &mut self,
        prefix: &str,
        name: (String, Vec<usize>),
        suffix: &str,
        domain: Domain,
        irregular: bool,
    ) -> Result<Draft> {
        let mut words = self.common(prefix)?;
        let at = words.len();
        let entity = (domain != Domain::General).then(|| name.0.clone());
        words.push(name);
        words.extend(self.common(suffix)?);
        Ok(Draft {
            spans: if entity.is_some() {
                vec![(at, at + 1)]
            } else {
                vec![]
            },
            words,
            entity,
            irregular,
            domain,
            catalog: None,
        })
    }

    fn general_sentence(&mut self) -> Result<Draft> {
        let f = self.filler();
        let words = match self.rng.random_range(0..7) {
            0 => {
                let t = self.pick(TIMES);
                let mut w = self.common("what is the weather in")?;
                w.push(f);
                w.extend(self.common(t)?);
                w
            }
            1 => {
                let n = self.pick(NUMBERS);
                self.common(&format!("set a timer for {n} minutes"))?
            }
            2 => {
                let g = self.pick(GENRES);
                let mut w = self.common(&format!("play some {g} by"))?;
                w.push(f);
                w
            }
            3 => {
                let mut w = self.common("add")?;
                w.push(f);
                w.extend(self.common("to my list")?);
                w
            }
            4 => {
                let s = self.pick(&["on", "off"]);
                let a = self.pick(APPLIANCES);
                self.common(&format!("turn {s} the {a}"))?
            }
            5 => {
                let v = self.pick(&["cook", "read", "walk"]);
                let t = self.pick(TIMES);
                self.common(&format!("remind me to {v} {t}"))?
            }
            _ => {
                let s = self.pick(SUFFIXES);
                let mut w = self.common("play")?;
                w.push(f);
                w.extend(self.common(s)?);
                w
            }
        };
        Ok(Draft {
            words,
            spans: vec![],
            entity: None,
            irregular: false,
            domain: Domain::General,
            catalog: None,
        })
    }

    fn spoken(&mut self, e: &EntityInfo) -> (String, Vec<usize>, bool) {
        let pron = e.prons.choose(&mut self.rng).unwrap().clone();
        let irregular = pron != self.lex.maps.regular(&e.word);
        (e.word.clone(), pron, irregular)
    }

    /// Samples a draft until its transcript avoids `taken`.
    fn unseen(
        &mut self,
        taken: &HashSet<String>,
        mut make: impl FnMut(&mut Self) -> Result<Draft>,
    ) -> Result<Draft> {
        for _ in 0..RESAMPLE_TRIES {
            let d = make(self)?;
            if !taken.contains(&d.transcript()) {
                return Ok(d);
            }
        }
        Err(Error::Generation(
            "could not sample a test sentence disjoint from the training transcripts".into(),
        ))
    }

    /// True entity, its family siblings, then random same-kind distractors.
    fn catalog_for(&mut self, target: &EntityInfo, size: usize) -> Vec<String> {
        let same: Vec<&EntityInfo> = self
            .lex
            .entities
            .iter()
            .filter(|e| e.kind == target.kind)
            .collect();
        let mut cat: Vec<String> = vec![target.word.clone()];
        cat.extend(
            same.iter()
                .filter(|e| e.family == target.family && e.word != target.word)
                .map(|e| e.word.clone()),
        );
        cat.truncate(size);
        let mut rest: Vec<&&EntityInfo> =
            same.iter().filter(|e| e.family != target.family).collect();
        rest.shuffle(&mut self.rng);
        cat.extend(
            rest.into_iter()
                .take(size - cat.len())
                .map(|e| e.word.clone()),
        );
        cat.shuffle(&mut self.rng);
        cat
    }

    fn distractor_catalog(&mut self, size: usize) -> Vec<String> {
        let mut people: Vec<String> = self
            .lex
            .entities
            .iter()
            .filter(|e| e.kind == EntityKind::Person)
            .map(|e| e.word.clone())
            .collect();
        people.shuffle(&mut self.rng);
        people.truncate(size);
        people
    }
}

/// Entity test draw: `rare` entities used once, the others at least twice.
fn entity_test_plan(
    n: usize,
    frac: f64,
    avail: &[usize],
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rare = (frac * n as f64).round() as usize;
    let mut rest = n - rare;
    if rest == 1 {
        rare += 1;
        rest = 0;
    }
    if rare > avail.len() {
        return Err(Error::Generation(format!(
            "{rare} rare entities requested but only {} exist",
            avail.len()
        )));
    }
    let mut pool = avail.to_vec();
    pool.shuffle(rng);
    let rare_ids = pool[..rare].to_vec();
    let freq = (pool.len() - rare).min(rest / 2);
    if rest > 0 && freq == 0 {
        return Err(Error::Generation(
            "no entities left for the frequent slice".into(),
        ));
    }
    let freq_ids = &pool[rare..rare + freq];
    let mut plan: Vec<usize> = rare_ids.clone();
    for i in 0..rest {
        plan.push(freq_ids[i % freq.max(1)]);
    }
    plan.shuffle(rng);
    Ok((plan, rare_ids))
}

/// Generates every split, catalog and the vocabulary from `cfg.seed`.
pub fn gen_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lex = gen_lexicon(cfg, &mut rng)?;
    let fs = FeatureSynth::new(
        cfg.phonemes,
        cfg.feat_dim,
        cfg.frames_per_phoneme,
        cfg.noise_sigma,
        &mut rng,
    );
    let mut g = Gen { lex: &lex, rng };
    let mut drafts: BTreeMap<Split, Vec<Draft>> = BTreeMap::new();
    let mut catalogs = BTreeMap::new();

    let mut base = Vec::with_capacity(cfg.train_base);
    for _ in 0..cfg.train_base {
        base.push(if g.rng.random_bool(cfg.base_person_fraction) {
            let f = g.filler();
            g.person_sentence(f, Domain::General, false)?
        } else {
            g.general_sentence()?
        });
    }
    drafts.insert(Split::TrainBase, base);

    let train_people: Vec<&EntityInfo> = lex
        .entities
        .iter()
        .filter(|e| e.kind == EntityKind::Person && e.adapter_train)
        .collect();
    if train_people.is_empty() {
        return Err(Error::Generation(
            "no entity families assigned to adapter training".into(),
        ));
    }
    let n_general = (cfg.adapter_general_fraction * cfg.train_adapter as f64).round() as usize;
    let mut adapter = Vec::with_capacity(cfg.train_adapter);
    for i in 0..cfg.train_adapter {
        adapter.push(if i < n_general {
            g.general_sentence()?
        } else {
            let e = *train_people.choose(&mut g.rng).unwrap();
            let (w, p, irr) = g.spoken(e);
            g.person_sentence((w, p), Domain::Entity, irr)?
        });
    }
    adapter.shuffle(&mut g.rng);
    drafts.insert(Split::TrainAdapter, adapter);

    let taken: HashSet<String> = drafts.values().flatten().map(Draft::transcript).collect();

    let mut general = Vec::with_capacity(cfg.test_general);
    for i in 0..cfg.test_general {
        let mut d = g.unseen(&taken, |g| g.general_sentence())?;
        let id = format!("{}-{i:05}", Split::TestGeneral);
        catalogs.insert(id.clone(), g.distractor_catalog(cfg.catalog_size));
        d.catalog = Some(id);
        general.push(d);
    }
    drafts.insert(Split::TestGeneral, general);

    let people: Vec<usize> = lex.of_kind(EntityKind::Person).map(|(i, _)| i).collect();
    let (plan, rare_ids) =
        entity_test_plan(cfg.test_entity, cfg.rare_fraction, &people, &mut g.rng)?;
    let mut rare: Vec<String> = rare_ids
        .iter()
        .map(|&i| lex.entities[i].word.clone())
        .collect();
    rare.sort();
    let mut entity = Vec::with_capacity(plan.len());
    for (i, &ei) in plan.iter().enumerate() {
        let e = &lex.entities[ei];
        let mut d = g.unseen(&taken, |g| {
            let (w, p, irr) = g.spoken(e);
            g.person_sentence((w, p), Domain::Entity, irr)
        })?;
        let id = format!("{}-{i:05}", Split::TestEntity);
        catalogs.insert(id.clone(), g.catalog_for(e, cfg.catalog_size));
        d.catalog = Some(id);
        entity.push(d);
    }
    drafts.insert(Split::TestEntity, entity);

    let devices: Vec<&EntityInfo> = lex.of_kind(EntityKind::Device).map(|(_, e)| e).collect();
    let mut device = Vec::with_capacity(cfg.test_device);
    for i in 0..cfg.test_device {
        let e = *devices.choose(&mut g.rng).unwrap();
        let (w, p, irr) = g.spoken(e);
        let (pre, suf) = *DEVICE_CARRIERS.choose(&mut g.rng).unwrap();
        let mut d = g.framed(pre, (w, p), suf, Domain::Device, irr)?;
        let id = format!("{}-{i:05}", Split::TestDevice);
        catalogs.insert(id.clone(), g.catalog_for(e, cfg.catalog_size));
        d.catalog = Some(id);
        device.push(d);
    }
    drafts.insert(Split::TestDevice, device);

    // Vocabulary from training text plus every catalog-eligible word, so
    // that catalog graphemes never fall back to <unk>.
    let mut text: Vec<String> = [Split::TrainBase, Split::TrainAdapter]
        .iter()
        .flat_map(|s| drafts[s].iter().map(Draft::transcript))
        .collect();
    text.extend(lex.lexicon.iter().map(|(w, _)| w.clone()));
    let vocab = build_vocab(&text, cfg.vocab_size)?;

    let mut feat_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f00d);
    let mut splits = BTreeMap::new();
    for (split, ds) in drafts {
        let mut out = Vec::with_capacity(ds.len());
        for (i, d) in ds.into_iter().enumerate() {
            let transcript = d.transcript();
            let targets = vocab.encode(&transcript);
            if targets.contains(&UNK_ID) {
                return Err(Error::Generation(format!(
                    "{transcript:?} is not covered by the vocabulary"
                )));
            }
            let mut phones = Vec::new();
            for (k, (_, p)) in d.words.iter().enumerate() {
                if k > 0 {
                    phones.push(fs.silence());
                }
                phones.extend(p);
            }
            phones.extend(std::iter::repeat_n(fs.silence(), cfg.tail_silence));
            out.push(Utterance {
                id: d
                    .catalog
                    .clone()
                    .unwrap_or_else(|| format!("{split}-{i:05}")),
                transcript,
                spans: d.spans,
                catalog: d.catalog,
                domain: d.domain,
                entity: d.entity,
                irregular: d.irregular,
                targets,
                features: fs.render(&phones, &mut feat_rng)?,
            });
        }
        splits.insert(split, out);
    }

    Ok(Corpus {
        cfg: cfg.clone(),
        inventory: lex.inventory.clone(),
        lexicon: lex.lexicon.clone(),
        vocab,
        entities: lex.entities.clone(),
        splits,
        catalogs,
        rare,
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

const ENTITY_HEADER: &str = "word\tfamily\tkind\tirregular\tadapter_train";

impl Corpus {
    /// Writes the corpus under `dir`:
    ///
    /// ```text
    /// synth.json  phones.txt  lexicon.txt  vocab.txt  merges.txt
    /// entities.tsv  rare.txt  catalogs/<id>.txt
    /// <split>.jsonl  <split>.feats
    /// ```
    ///
    /// A `.feats` file holds, per record, a `[u32 T, u32 D]` header and
    /// T·D little-endian `f32` values.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let cat_dir = dir.join("catalogs");
        fs::create_dir_all(&cat_dir).map_err(|e| Error::io(&cat_dir, e))?;
        write(
            &dir.join("synth.json"),
            serde_json::to_string_pretty(&self.cfg)?,
        )?;
        self.inventory.to_file(&dir.join("phones.txt"))?;
        self.lexicon.to_file(&dir.join("lexicon.txt"))?;
        self.vocab
            .to_files(&dir.join("vocab.txt"), &dir.join("merges.txt"))?;
        let mut tsv = format!("{ENTITY_HEADER}\n");
        for e in &self.entities {
            let kind = match e.kind {
                EntityKind::Person => "person",
                EntityKind::Device => "device",
            };
            tsv.push_str(&format!(
                "{}\t{}\t{kind}\t{}\t{}\n",
                e.word, e.family, e.irregular as u8, e.adapter_train as u8
            ));
        }
        write(&dir.join("entities.tsv"), tsv)?;
        write(
            &dir.join("rare.txt"),
            self.rare
                .iter()
                .map(|r| format!("{r}\n"))
                .collect::<String>(),
        )?;
        for (id, ents) in &self.catalogs {
            write_catalog_file(&cat_dir.join(format!("{id}.txt")), ents)?;
        }
        for (split, utts) in &self.splits {
            let feat_name = format!("{split}.feats");
            let mut blob = Vec::new();
            let mut jsonl = String::new();
            for u in utts {
                let rec = Record {
                    id: u.id.clone(),
                    transcript: u.transcript.clone(),
                    spans: u.spans.clone(),
                    catalog: u.catalog.clone(),
                    domain: u.domain,
                    entity: u.entity.clone(),
                    irregular: u.irregular,
                    targets: u.targets.clone(),
                    feats: FeatRef {
                        file: feat_name.clone(),
                        offset: blob.len() as u64,
                        frames: u.features.rows(),
                    },
                };
                blob.extend_from_slice(&(u.features.rows() as u32).to_le_bytes());
                blob.extend_from_slice(&(u.features.cols() as u32).to_le_bytes());
                for &x in u.features.data() {
                    blob.extend_from_slice(&(x as f32).to_le_bytes());
                }
                jsonl.push_str(&serde_json::to_string(&rec)?);
                jsonl.push('\n');
            }
            write(&dir.join(&feat_name), blob)?;
            write(&dir.join(format!("{split}.jsonl")), jsonl)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg: SynthConfig = serde_json::from_str(&read(&dir.join("synth.json"))?)?;
        let inventory = PhonemeInventory::from_file(&dir.join("phones.txt"))?;
        let lexicon = parse_lexicon(&dir.join("lexicon.txt"), &inventory)?;
        let vocab = Vocab::from_files(&dir.join("vocab.txt"), &dir.join("merges.txt"))?;
        let tsv_path = dir.join("entities.tsv");
        let mut entities = Vec::new();
        for (i, line) in read(&tsv_path)?.lines().enumerate().skip(1) {
            let err = |msg: &str| Error::Parse {
                path: tsv_path.display().to_string(),
                line: i + 1,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(err("expected 5 tab-separated fields"));
            }
            let kind = match f[2] {
                "person" => EntityKind::Person,
                "device" => EntityKind::Device,
                _ => return Err(err("kind must be person or device")),
            };
            let prons = lexicon
                .get(f[0])
                .ok_or_else(|| err("entity missing from lexicon"))?
                .to_vec();
            entities.push(EntityInfo {
                word: f[0].to_string(),
                family: f[1].parse().map_err(|_| err("bad family id"))?,
                kind,
                irregular: f[3] == "1",
                adapter_train: f[4] == "1",
                prons,
            });
        }
        let rare = read(&dir.join("rare.txt"))?
            .lines()
            .map(str::to_string)
            .collect();

        let mut splits = BTreeMap::new();
        let mut catalogs = BTreeMap::new();
        for split in Split::ALL {
            let jpath = dir.join(format!("{split}.jsonl"));
            if !jpath.exists() {
                continue;
            }
            let fpath = dir.join(format!("{split}.feats"));
            let blob = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
            let mut utts = Vec::new();
            for (i, line) in read(&jpath)?.lines().enumerate() {
                let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
                    path: jpath.display().to_string(),
                    line: i + 1,
                    msg: e.to_string(),
                })?;
                let features = read_feats(&blob, rec.feats.offset as usize, &fpath)?;
                if features.rows() != rec.feats.frames {
                    return Err(Error::Input(format!("{}: frame count mismatch", rec.id)));
                }
                if let Some(c) = &rec.catalog {
                    if !catalogs.contains_key(c) {
                        let p = dir.join("catalogs").join(format!("{c}.txt"));
                        catalogs.insert(c.clone(), read_catalog_file(&p)?);
                    }
                }
                utts.push(Utterance {
                    id: rec.id,
                    transcript: rec.transcript,
                    spans: rec.spans,
                    catalog: rec.catalog,
                    domain: rec.domain,
                    entity: rec.entity,
                    irregular: rec.irregular,
                    targets: rec.targets,
                    features,
                });
            }
            splits.insert(split, utts);
        }
        Ok(Corpus {
            cfg,
            inventory,
            lexicon,
            vocab,
            entities,
            splits,
            catalogs,
            rare,
        })
    }
}

fn read_feats(blob: &[u8], offset: usize, path: &Path) -> Result<Tensor> {
    let bad = || {
        Error::Input(format!(
            "{}: truncated feature record at {offset}",
            path.display()
        ))
    };
    let head = blob.get(offset..offset + 8).ok_or_else(bad)?;
    let t = u32::from_le_bytes(head[..4].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(head[4..].try_into().unwrap()) as usize;
    let raw = blob
        .get(offset + 8..offset + 8 + 4 * t * d)
        .ok_or_else(bad)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![t, d], data)
}

/// SHA-256 over every file below `dir` (relative path and contents, in
/// sorted path order).
pub fn dir_hash(dir: &Path) -> Result<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = entry.map_err(|e| Error::io(dir, e))?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let bytes = fs::read(dir.join(&f)).map_err(|e| Error::io(dir.join(&f), e))?;
        h.update(f.to_string_lossy().as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}
