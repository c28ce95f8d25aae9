//! Unified discrete token space: vocabulary management, toy tokenizers for
//! observations / action chunks / text / progress, sparse keyframe memory
//! with frame-index text tokens, and assembly of the flattened sequence
//! `[history] [instruction] [current obs] [actions] [SEP] [target] [progress]`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::{Action, ActionChunk, Grip, Observation, Progress, PALETTE};
use crate::{Error, Result};

pub type TokenId = u32;

/// Fixed instruction word list; anything else must be spelled in digits.
pub const WORDS: [&str; 4] = ["place", "object", "on", "target"];
pub const N_ACTION_TOKENS: u32 = 27;
pub const INDEX_DIGITS: usize = 4;

/// Disjoint id ranges over a single vocabulary:
/// `[visual][action][digit][word][progress][MASK PAD SEP BOS]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub palette: u8,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary { palette: PALETTE }
    }
}

impl Vocabulary {
    pub fn visual_start(&self) -> TokenId {
        0
    }
    pub fn action_start(&self) -> TokenId {
        self.palette as TokenId
    }
    pub fn digit_start(&self) -> TokenId {
        self.action_start() + N_ACTION_TOKENS
    }
    pub fn word_start(&self) -> TokenId {
        self.digit_start() + 10
    }
    pub fn progress_start(&self) -> TokenId {
        self.word_start() + WORDS.len() as TokenId
    }
    pub fn mask(&self) -> TokenId {
        self.progress_start() + 6
    }
    pub fn pad(&self) -> TokenId {
        self.mask() + 1
    }
    pub fn sep(&self) -> TokenId {
        self.mask() + 2
    }
    pub fn bos(&self) -> TokenId {
        self.mask() + 3
    }
    pub fn size(&self) -> usize {
        (self.mask() + 4) as usize
    }

    pub fn is_visual(&self, id: TokenId) -> bool {
        id < self.palette as TokenId
    }
    pub fn is_progress(&self, id: TokenId) -> bool {
        (self.progress_start()..self.progress_start() + 6).contains(&id)
    }

    pub fn visual_id(&self, code: u8) -> TokenId {
        debug_assert!(code < self.palette);
        code as TokenId
    }

    pub fn action_id(&self, a: &Action) -> TokenId {
        self.action_start()
            + ((a.dx + 1) as TokenId * 9 + (a.dy + 1) as TokenId * 3 + a.grip.code() as TokenId)
    }

    pub fn action_from_id(&self, id: TokenId) -> Option<Action> {
        let rel = id.checked_sub(self.action_start())?;
        if rel >= N_ACTION_TOKENS {
            return None;
        }
        let dx = (rel / 9) as i8 - 1;
        let dy = ((rel / 3) % 3) as i8 - 1;
        let grip = Grip::from_code((rel % 3) as u8)?;
        Some(Action::new(dx, dy, grip))
    }

    pub fn digit_id(&self, d: u8) -> TokenId {
        debug_assert!(d < 10);
        self.digit_start() + d as TokenId
    }

    pub fn word_id(&self, w: &str) -> Option<TokenId> {
        WORDS
            .iter()
            .position(|x| *x == w)
            .map(|i| self.word_start() + i as TokenId)
    }

    pub fn progress_id(&self, p: Progress) -> TokenId {
        self.progress_start() + p.fifths() as TokenId
    }

    pub fn progress_from_id(&self, id: TokenId) -> Option<Progress> {
        let rel = id.checked_sub(self.progress_start())?;
        Progress::from_fifths(rel as u8)
    }

    /// Surface symbol for every decodable id, in id order.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for id in 0..self.size() as TokenId {
            let symbol = if self.is_visual(id) {
                format!("cell:{id}")
            } else if let Some(a) = self.action_from_id(id) {
                format!("act:({},{},{})", a.dx, a.dy, a.grip.code())
            } else if (self.digit_start()..self.digit_start() + 10).contains(&id) {
                format!("digit:{}", id - self.digit_start())
            } else if (self.word_start()..self.progress_start()).contains(&id) {
                format!("word:{}", WORDS[(id - self.word_start()) as usize])
            } else if let Some(p) = self.progress_from_id(id) {
                format!("progress:{}", p.label())
            } else if id == self.mask() {
                "special:MASK".into()
            } else if id == self.pad() {
                "special:PAD".into()
            } else if id == self.sep() {
                "special:SEP".into()
            } else {
                "special:BOS".into()
            };
            out.push_str(&format!("{id}\t{symbol}\n"));
        }
        out
    }

    pub fn hash(&self) -> String {
        use sha2::Digest;
        let digest = sha2::Sha256::digest(self.manifest().as_bytes());
        format!("{digest:x}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Resolution {
    Full,
    Low,
}

/// Full resolution is the lossless row-major cell reading; low resolution is
/// 2x2 majority pooling with ties broken toward the smallest code.
pub fn tokenize_observation(vocab: &Vocabulary, obs: &Observation, res: Resolution) -> Vec<TokenId> {
    match res {
        Resolution::Full => obs.cells.iter().map(|&c| vocab.visual_id(c)).collect(),
        Resolution::Low => {
            let lw = obs.width.div_ceil(2);
            let lh = obs.height.div_ceil(2);
            let mut out = Vec::with_capacity(lw * lh);
            for py in 0..lh {
                for px in 0..lw {
                    let mut counts = [0u8; 256];
                    for sy in 0..2 {
                        for sx in 0..2 {
                            let x = px * 2 + sx;
                            let y = py * 2 + sy;
                            if x < obs.width && y < obs.height {
                                counts[obs.cells[y * obs.width + x] as usize] += 1;
                            }
                        }
                    }
                    let code = counts
                        .iter()
                        .enumerate()
                        .filter(|(_, &n)| n > 0)
                        .max_by_key(|&(c, &n)| (n, std::cmp::Reverse(c)))
                        .map(|(c, _)| c as u8)
                        .unwrap();
                    out.push(vocab.visual_id(code));
                }
            }
            out
        }
    }
}

/// Exact inverse of full-resolution tokenization.
pub fn detokenize_observation(
    vocab: &Vocabulary,
    tokens: &[TokenId],
    width: usize,
    height: usize,
) -> Result<Observation> {
    if tokens.len() != width * height {
        return Err(Error::Config(format!(
            "expected {} visual tokens, got {}",
            width * height,
            tokens.len()
        )));
    }
    let cells = tokens
        .iter()
        .enumerate()
        .map(|(pos, &id)| {
            if vocab.is_visual(id) {
                Ok(id as u8)
            } else {
                Err(Error::Decode { pos, id })
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(Observation { width, height, cells })
}

/// One token per step, bijective with the 27 (dx, dy, grip) triples.
pub fn tokenize_chunk(vocab: &Vocabulary, chunk: &ActionChunk) -> Vec<TokenId> {
    chunk.0.iter().map(|a| vocab.action_id(a)).collect()
}

pub fn detokenize_chunk(vocab: &Vocabulary, tokens: &[TokenId]) -> Result<ActionChunk> {
    tokens
        .iter()
        .enumerate()
        .map(|(pos, &id)| vocab.action_from_id(id).ok_or(Error::Decode { pos, id }))
        .collect::<Result<Vec<Action>>>()
        .map(ActionChunk)
}

/// Words map to word ids; numeric tokens are spelled digit by digit. The
/// result is padded (or truncated) to `len`.
pub fn tokenize_instruction(vocab: &Vocabulary, text: &str, len: usize) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(len);
    for tok in text.split_whitespace() {
        if let Some(id) = vocab.word_id(tok) {
            out.push(id);
        } else {
            for ch in tok.chars() {
                if let Some(d) = ch.to_digit(10) {
                    out.push(vocab.digit_id(d as u8));
                }
            }
        }
    }
    out.truncate(len);
    while out.len() < len {
        out.push(vocab.pad());
    }
    out
}

/// Fixed-width decimal frame index, one digit token per position.
pub fn tokenize_frame_index(vocab: &Vocabulary, index: u64) -> Vec<TokenId> {
    let s = format!("{index:0width$}", width = INDEX_DIGITS);
    s.bytes()
        .rev()
        .take(INDEX_DIGITS)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .map(|b| vocab.digit_id(b - b'0'))
        .collect()
}

/// Sliding window of the most recent `capacity` low-resolution keyframes,
/// each tagged with its absolute frame index; indices advance by `stride`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeMemory {
    pub capacity: usize,
    pub stride: usize,
    pub entries: Vec<(u64, Vec<TokenId>)>,
}

impl KeyframeMemory {
    pub fn new(capacity: usize, stride: usize) -> KeyframeMemory {
        KeyframeMemory { capacity, stride, entries: Vec::new() }
    }

    /// Appends a low-resolution keyframe; evicts the oldest beyond capacity.
    /// The index must continue the stride-aligned progression.
    pub fn push_keyframe(
        &mut self,
        vocab: &Vocabulary,
        frame_index: u64,
        obs: &Observation,
    ) -> Result<()> {
        if let Some(&(last, _)) = self.entries.last() {
            if frame_index != last + self.stride as u64 {
                return Err(Error::Contract(format!(
                    "keyframe index {frame_index} does not follow {last} with stride {}",
                    self.stride
                )));
            }
        }
        self.entries
            .push((frame_index, tokenize_observation(vocab, obs, Resolution::Low)));
        if self.entries.len() > self.capacity {
            self.entries.remove(0);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    History,
    Instruction,
    CurrentObs,
    Action,
    Sep,
    TargetObs,
    Progress,
}

pub const N_SEGMENT_KINDS: usize = 7;

impl SegmentKind {
    pub fn index(self) -> usize {
        match self {
            SegmentKind::History => 0,
            SegmentKind::Instruction => 1,
            SegmentKind::CurrentObs => 2,
            SegmentKind::Action => 3,
            SegmentKind::Sep => 4,
            SegmentKind::TargetObs => 5,
            SegmentKind::Progress => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub offset: usize,
    pub len: usize,
}

/// Geometry of every built sequence for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutConfig {
    pub width: usize,
    pub height: usize,
    pub k_keyframes: usize,
    pub chunk_size: usize,
    pub instruction_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub config: LayoutConfig,
    pub segments: Vec<Segment>,
    pub total_len: usize,
}

impl SequenceLayout {
    pub fn new(config: LayoutConfig) -> SequenceLayout {
        let low = config.width.div_ceil(2) * config.height.div_ceil(2);
        let obs = config.width * config.height;
        let lens = [
            (SegmentKind::History, config.k_keyframes * (INDEX_DIGITS + low)),
            (SegmentKind::Instruction, config.instruction_len),
            (SegmentKind::CurrentObs, obs),
            (SegmentKind::Action, config.chunk_size),
            (SegmentKind::Sep, 1),
            (SegmentKind::TargetObs, obs),
            (SegmentKind::Progress, 1),
        ];
        let mut segments = Vec::new();
        let mut offset = 0;
        for (kind, len) in lens {
            segments.push(Segment { kind, offset, len });
            offset += len;
        }
        SequenceLayout { config, segments, total_len: offset }
    }

    pub fn segment(&self, kind: SegmentKind) -> &Segment {
        self.segments.iter().find(|s| s.kind == kind).unwrap()
    }

    pub fn keyframe_slot_len(&self) -> usize {
        INDEX_DIGITS + self.config.width.div_ceil(2) * self.config.height.div_ceil(2)
    }

    /// Segment kind of every position, in order.
    pub fn kinds_per_position(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.total_len];
        for seg in &self.segments {
            for p in seg.offset..seg.offset + seg.len {
                out[p] = seg.kind.index() as u8;
            }
        }
        out
    }

    /// Positions of the target suffix (target frame + progress token).
    pub fn target_range(&self) -> std::ops::Range<usize> {
        let t = self.segment(SegmentKind::TargetObs);
        t.offset..self.total_len
    }
}

/// A flattened token sequence plus which positions currently carry MASK.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub mask_flags: Vec<bool>,
    pub layout: Arc<SequenceLayout>,
}

/// Assemble the unified sequence. Training callers pass the clean target and
/// progress; inference callers pass `None` for both, which fills the target
/// suffix with MASK.
#[allow(clippy::too_many_arguments)]
pub fn build_sequence(
    vocab: &Vocabulary,
    layout: &Arc<SequenceLayout>,
    memory: &KeyframeMemory,
    instruction: &str,
    current_obs: &Observation,
    chunk: &ActionChunk,
    target_obs: Option<&Observation>,
    progress: Option<Progress>,
) -> Result<TokenSequence> {
    if memory.entries.len() > layout.config.k_keyframes {
        return Err(Error::Contract(format!(
            "memory holds {} keyframes, layout allows {}",
            memory.entries.len(),
            layout.config.k_keyframes
        )));
    }
    if chunk.len() != layout.config.chunk_size {
        return Err(Error::Contract(format!(
            "chunk length {} does not match layout stride {}",
            chunk.len(),
            layout.config.chunk_size
        )));
    }
    let mut ids = vec![vocab.pad(); layout.total_len];
    let mut mask_flags = vec![false; layout.total_len];

    // History: most recent keyframes fill the trailing slots; missing slots
    // stay PAD.
    let hist = layout.segment(SegmentKind::History);
    let slot = layout.keyframe_slot_len();
    let missing = layout.config.k_keyframes - memory.entries.len();
    for (i, (index, frame)) in memory.entries.iter().enumerate() {
        let base = hist.offset + (missing + i) * slot;
        let digits = tokenize_frame_index(vocab, *index);
        ids[base..base + INDEX_DIGITS].copy_from_slice(&digits);
        ids[base + INDEX_DIGITS..base + slot].copy_from_slice(frame);
    }

    let instr = layout.segment(SegmentKind::Instruction);
    let instr_ids = tokenize_instruction(vocab, instruction, instr.len);
    ids[instr.offset..instr.offset + instr.len].copy_from_slice(&instr_ids);

    let cur = layout.segment(SegmentKind::CurrentObs);
    let cur_ids = tokenize_observation(vocab, current_obs, Resolution::Full);
    if cur_ids.len() != cur.len {
        return Err(Error::Contract("observation does not match layout size".into()));
    }
    ids[cur.offset..cur.offset + cur.len].copy_from_slice(&cur_ids);

    let act = layout.segment(SegmentKind::Action);
    let act_ids = tokenize_chunk(vocab, chunk);
    ids[act.offset..act.offset + act.len].copy_from_slice(&act_ids);

    ids[layout.segment(SegmentKind::Sep).offset] = vocab.sep();

    let tgt = layout.segment(SegmentKind::TargetObs);
    match target_obs {
        Some(obs) => {
            let tgt_ids = tokenize_observation(vocab, obs, Resolution::Full);
            if tgt_ids.len() != tgt.len {
                return Err(Error::Contract("target does not match layout size".into()));
            }
            ids[tgt.offset..tgt.offset + tgt.len].copy_from_slice(&tgt_ids);
        }
        None => {
            for p in tgt.offset..tgt.offset + tgt.len {
                ids[p] = vocab.mask();
                mask_flags[p] = true;
            }
        }
    }

    let prog = layout.segment(SegmentKind::Progress);
    match progress {
        Some(p) => ids[prog.offset] = vocab.progress_id(p),
        None => {
            ids[prog.offset] = vocab.mask();
            mask_flags[prog.offset] = true;
        }
    }

    Ok(TokenSequence { ids, mask_flags, layout: Arc::clone(layout) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{self, GridConfig};
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::default()
    }

    fn sample_obs(seed: u64) -> Observation {
        env::render(&env::reset(&GridConfig::default(), seed))
    }

    #[test]
    fn id_ranges_are_disjoint_and_cover() {
        let v = vocab();
        assert_eq!(v.size(), 16 + 27 + 10 + WORDS.len() + 6 + 4);
        // Every decodable id maps back to exactly one surface symbol.
        let manifest = v.manifest();
        assert_eq!(manifest.lines().count(), v.size());
        let symbols: std::collections::HashSet<&str> = manifest
            .lines()
            .map(|l| l.split('\t').nth(1).unwrap())
            .collect();
        assert_eq!(symbols.len(), v.size());
    }

    #[test]
    fn full_resolution_round_trip() {
        let v = vocab();
        for seed in 0..10 {
            let obs = sample_obs(seed);
            let toks = tokenize_observation(&v, &obs, Resolution::Full);
            assert_eq!(toks.len(), obs.width * obs.height);
            let back = detokenize_observation(&v, &toks, obs.width, obs.height).unwrap();
            assert_eq!(back, obs);
        }
    }

    #[test]
    fn all_background_tokenizes_to_zero() {
        let v = vocab();
        let obs = Observation { width: 4, height: 4, cells: vec![0; 16] };
        assert!(tokenize_observation(&v, &obs, Resolution::Full)
            .iter()
            .all(|&t| t == v.visual_id(0)));
    }

    #[test]
    fn pooling_tie_breaks_to_smallest_code() {
        let v = vocab();
        let obs = Observation { width: 2, height: 2, cells: vec![0, 0, 3, 3] };
        assert_eq!(tokenize_observation(&v, &obs, Resolution::Low), vec![v.visual_id(0)]);
        // Exhaustive over all 2x2 combinations of a few codes.
        for a in 0..4u8 {
            for b in 0..4u8 {
                for c in 0..4u8 {
                    for d in 0..4u8 {
                        let obs = Observation { width: 2, height: 2, cells: vec![a, b, c, d] };
                        let got = tokenize_observation(&v, &obs, Resolution::Low)[0] as u8;
                        // Reference: max count, smallest code on ties.
                        let mut counts = std::collections::BTreeMap::new();
                        for x in [a, b, c, d] {
                            *counts.entry(x).or_insert(0) += 1;
                        }
                        let best = counts
                            .iter()
                            .fold((0u8, 0i32), |(bc, bn), (&c2, &n)| {
                                if n > bn {
                                    (c2, n)
                                } else {
                                    (bc, bn)
                                }
                            })
                            .0;
                        assert_eq!(got, best, "cells {:?}", [a, b, c, d]);
                    }
                }
            }
        }
    }

    #[test]
    fn mask_id_fails_detokenization() {
        let v = vocab();
        let mut toks = tokenize_observation(&v, &sample_obs(0), Resolution::Full);
        toks[5] = v.mask();
        let err = detokenize_observation(&v, &toks, 12, 12).unwrap_err();
        assert!(matches!(err, Error::Decode { pos: 5, .. }));
    }

    #[test]
    fn wrong_length_fails_detokenization() {
        let v = vocab();
        assert!(detokenize_observation(&v, &[0, 1, 2], 12, 12).is_err());
    }

    #[test]
    fn action_tokens_are_bijective() {
        let v = vocab();
        let mut seen = std::collections::HashSet::new();
        for dx in -1i8..=1 {
            for dy in -1i8..=1 {
                for g in 0..3u8 {
                    let a = Action::new(dx, dy, Grip::from_code(g).unwrap());
                    let id = v.action_id(&a);
                    assert!(seen.insert(id), "duplicate id for {a:?}");
                    assert_eq!(v.action_from_id(id), Some(a));
                }
            }
        }
        assert_eq!(seen.len(), 27);
    }

    #[test]
    fn chunk_round_trip() {
        let v = vocab();
        let chunk = ActionChunk(vec![Action::NOOP; 4]);
        let toks = tokenize_chunk(&v, &chunk);
        assert!(toks.iter().all(|&t| t == v.action_id(&Action::NOOP)));
        assert_eq!(detokenize_chunk(&v, &toks).unwrap(), chunk);
    }

    #[test]
    fn progress_round_trip() {
        let v = vocab();
        for p in Progress::LEVELS {
            assert_eq!(v.progress_from_id(v.progress_id(p)), Some(p));
        }
        assert_eq!(v.progress_from_id(v.mask()), None);
    }

    #[test]
    fn keyframe_memory_evicts_oldest() {
        let v = vocab();
        let mut mem = KeyframeMemory::new(4, 2);
        for i in 0..5u64 {
            mem.push_keyframe(&v, i * 2, &sample_obs(i)).unwrap();
        }
        assert_eq!(mem.entries.len(), 4);
        assert_eq!(mem.entries[0].0, 2);
        assert_eq!(mem.entries.last().unwrap().0, 8);
    }

    #[test]
    fn keyframe_memory_rejects_misaligned_index() {
        let v = vocab();
        let mut mem = KeyframeMemory::new(4, 2);
        mem.push_keyframe(&v, 0, &sample_obs(0)).unwrap();
        let err = mem.push_keyframe(&v, 3, &sample_obs(1)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    fn default_layout() -> Arc<SequenceLayout> {
        Arc::new(SequenceLayout::new(LayoutConfig {
            width: 12,
            height: 12,
            k_keyframes: 4,
            chunk_size: 4,
            instruction_len: 5,
        }))
    }

    #[test]
    fn layout_offsets_match_formula() {
        let layout = default_layout();
        assert_eq!(layout.segment(SegmentKind::History).len, 4 * (INDEX_DIGITS + 36));
        assert_eq!(layout.segment(SegmentKind::CurrentObs).len, 144);
        assert_eq!(layout.segment(SegmentKind::Action).len, 4);
        assert_eq!(layout.segment(SegmentKind::TargetObs).len, 144);
        assert_eq!(layout.segment(SegmentKind::Progress).len, 1);
        // Segments contiguous and disjoint.
        let mut expect = 0;
        for s in &layout.segments {
            assert_eq!(s.offset, expect);
            expect += s.len;
        }
        assert_eq!(expect, layout.total_len);
        assert_eq!(
            layout.total_len,
            4 * (INDEX_DIGITS + 36) + 5 + 144 + 4 + 1 + 144 + 1
        );
    }

    #[test]
    fn empty_memory_pads_history() {
        let v = vocab();
        let layout = default_layout();
        let mem = KeyframeMemory::new(4, 4);
        let obs = sample_obs(0);
        let chunk = ActionChunk::noops(4);
        let seq = build_sequence(&v, &layout, &mem, "place object 0 on target", &obs, &chunk, None, None)
            .unwrap();
        let hist = layout.segment(SegmentKind::History);
        assert!(seq.ids[hist.offset..hist.offset + hist.len]
            .iter()
            .all(|&t| t == v.pad()));
    }

    #[test]
    fn training_sequence_is_clean_and_inference_is_masked() {
        let v = vocab();
        let layout = default_layout();
        let mem = KeyframeMemory::new(4, 4);
        let obs = sample_obs(1);
        let target = sample_obs(2);
        let chunk = ActionChunk::noops(4);
        let train = build_sequence(
            &v,
            &layout,
            &mem,
            "place object 0 on target",
            &obs,
            &chunk,
            Some(&target),
            Some(Progress::LEVELS[1]),
        )
        .unwrap();
        assert!(train.mask_flags.iter().all(|&f| !f));
        assert!(train.ids.iter().all(|&t| t != v.mask()));
        let infer =
            build_sequence(&v, &layout, &mem, "place object 0 on target", &obs, &chunk, None, None)
                .unwrap();
        for p in 0..infer.ids.len() {
            assert_eq!(infer.mask_flags[p], layout.target_range().contains(&p));
            assert_eq!(infer.ids[p] == v.mask(), infer.mask_flags[p]);
        }
    }

    #[test]
    fn frame_index_tokens_decode_to_progression() {
        let v = vocab();
        let layout = default_layout();
        let mut mem = KeyframeMemory::new(4, 4);
        for i in 0..6u64 {
            mem.push_keyframe(&v, i * 4, &sample_obs(i)).unwrap();
        }
        let seq = build_sequence(
            &v,
            &layout,
            &mem,
            "place object 0 on target",
            &sample_obs(9),
            &ActionChunk::noops(4),
            None,
            None,
        )
        .unwrap();
        let hist = layout.segment(SegmentKind::History);
        let slot = layout.keyframe_slot_len();
        let mut indices = Vec::new();
        for k in 0..4 {
            let base = hist.offset + k * slot;
            let digits: String = seq.ids[base..base + INDEX_DIGITS]
                .iter()
                .map(|&d| char::from(b'0' + (d - v.digit_start()) as u8))
                .collect();
            indices.push(digits.parse::<u64>().unwrap());
        }
        assert_eq!(indices, vec![8, 12, 16, 20]);
        for w in indices.windows(2) {
            assert_eq!(w[1] - w[0], 4);
        }
    }

    proptest! {
        #[test]
        fn context_positions_never_masked(seed in 0u64..200) {
            let v = vocab();
            let layout = default_layout();
            let mem = KeyframeMemory::new(4, 4);
            let obs = sample_obs(seed);
            let seq = build_sequence(
                &v, &layout, &mem, "place object 0 on target", &obs,
                &ActionChunk::noops(4), None, None,
            ).unwrap();
            let target = layout.target_range();
            for p in 0..seq.ids.len() {
                if !target.contains(&p) {
                    prop_assert!(!seq.mask_flags[p]);
                    prop_assert!(seq.ids[p] != v.mask());
                }
            }
        }
    }
}
