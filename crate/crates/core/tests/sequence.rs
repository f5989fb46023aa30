mod common;

use imgchat_core::sequence::{
    image_span_len, pack_document, render_chat_template, segment_long_document, ImageId, MultimodalDocument,
    PackOptions, QueryPosition, Segment, SequenceError, Slot, SpanRole, Stage, Target,
};
use imgchat_core::synthworld::{make_instruction_pools, make_stage1_corpus, InstructionPoolSizes, Stage1CorpusConfig};
use imgchat_core::trainer::{
    read_instruction_corpus, read_stage1_corpus, write_instruction_corpus, write_stage1_corpus, InstructionCorpus,
};
use proptest::prelude::*;

use common::world;

fn role() -> impl Strategy<Value = SpanRole> {
    prop_oneof![Just(SpanRole::Plain), Just(SpanRole::User), Just(SpanRole::Assistant)]
}

fn segment() -> impl Strategy<Value = Segment> {
    prop_oneof![
        (prop::collection::vec(0u32..50, 1..30), role()).prop_map(|(tokens, role)| Segment::Text { tokens, role }),
        (0u32..100, role()).prop_map(|(id, role)| Segment::Image { id: ImageId(id), role }),
    ]
}

fn document() -> impl Strategy<Value = MultimodalDocument> {
    prop::collection::vec(segment(), 1..12).prop_map(|segs| {
        let mut d = MultimodalDocument::new();
        for s in segs {
            match s {
                Segment::Text { tokens, role } => d.push_text(tokens, role),
                Segment::Image { id, role } => d.push_image(id, role),
            }
        }
        d
    })
}

fn images(d: &MultimodalDocument) -> Vec<ImageId> {
    d.segments
        .iter()
        .filter_map(|s| match s {
            Segment::Image { id, .. } => Some(*id),
            _ => None,
        })
        .collect()
}

proptest! {
    #[test]
    fn segmentation_concatenates_back(doc in document(), n_latents in 1usize..5, extra in 1usize..40) {
        let max_len = image_span_len(n_latents) + extra;
        let parts = segment_long_document(&doc, max_len, n_latents).unwrap();
        let mut joined = MultimodalDocument::new();
        for p in &parts {
            prop_assert!(!p.is_empty());
            prop_assert!(p.expanded_len(n_latents) <= max_len);
            joined.extend(p.clone());
        }
        prop_assert_eq!(&joined, &doc);
        let total: Vec<ImageId> = parts.iter().flat_map(images).collect();
        prop_assert_eq!(total, images(&doc));
    }

    #[test]
    fn packing_invariants(doc in document(), n_latents in 1usize..4, cls in any::<bool>(), instruct in any::<bool>()) {
        let query_at = if cls { QueryPosition::Cls } else { QueryPosition::Img };
        let stage = if instruct { Stage::Instruction } else { Stage::Alignment };
        let opts = PackOptions { n_latents, max_len: 4096, query_at };
        let p = pack_document(&doc, stage, &opts).unwrap();
        prop_assert_eq!(p.len(), 1 + doc.expanded_len(n_latents));
        prop_assert_eq!(p.targets.len(), p.len());
        prop_assert_eq!(p.loss_mask.len(), p.len());
        prop_assert_eq!(p.roles.len(), p.len());
        prop_assert_eq!(&p.images, &images(&doc));
        prop_assert_eq!(p.image_positions.len(), p.images.len());
        for (k, ip) in p.image_positions.iter().enumerate() {
            prop_assert_eq!(p.targets[ip.query_index], Some(Target::Image(k)));
            let expect = if cls { ip.img_token_index + 1 } else { ip.img_token_index };
            prop_assert_eq!(ip.query_index, expect);
            prop_assert_eq!(ip.in_loss, !instruct || p.roles[ip.img_token_index] == SpanRole::Assistant);
        }
        for t in 0..p.len() {
            if matches!(p.slots[t], Slot::Latent { .. }) {
                prop_assert!(p.targets[t].is_none());
            }
            if let Slot::Cls { blank, .. } = p.slots[t] {
                if !cls {
                    prop_assert!(p.targets[t].is_none());
                    prop_assert!(!blank);
                }
            }
            if p.loss_mask[t] {
                prop_assert!(p.targets[t].is_some());
                if instruct {
                    prop_assert_eq!(p.roles[t + 1], SpanRole::Assistant);
                }
            } else if !instruct {
                prop_assert!(p.targets[t].is_none());
            }
        }
        prop_assert!(p.targets.last().unwrap().is_none());
    }

    #[test]
    fn overlength_is_reported(doc in document(), n_latents in 1usize..4) {
        let need = 1 + doc.expanded_len(n_latents);
        let opts = PackOptions { n_latents, max_len: need - 1, query_at: QueryPosition::Img };
        prop_assert!(
            matches!(pack_document(&doc, Stage::Alignment, &opts), Err(SequenceError::Overlength { .. })),
            "expected an overlength error"
        );
    }
}

#[test]
fn chat_template_masks_user_turns() {
    let w = world();
    let pools = make_instruction_pools(
        &w,
        &(0..400).map(ImageId).collect::<Vec<_>>(),
        &InstructionPoolSizes {
            chatsearch: 10,
            qa: 10,
            edit: 10,
            ..InstructionPoolSizes::default()
        },
    )
    .unwrap();
    let c = InstructionCorpus::from_pools(&pools);
    let opts = PackOptions {
        n_latents: 2,
        max_len: 1024,
        query_at: QueryPosition::Img,
    };
    for d in c.chatsearch.iter().chain(&c.edit) {
        let doc = render_chat_template(d, w.vocab()).unwrap();
        let p = pack_document(&doc, Stage::Instruction, &opts).unwrap();
        // Only assistant images are retrieval targets; the final answer always is.
        for ip in &p.image_positions {
            assert_eq!(ip.in_loss, p.roles[ip.img_token_index] == SpanRole::Assistant);
        }
        let last = p.image_positions.last().unwrap();
        assert!(last.in_loss);
        assert!(p.loss_mask.iter().any(|&m| m));
    }
}

#[test]
fn corpora_roundtrip_through_files() {
    let w = world();
    let pool: Vec<ImageId> = (0..300).map(ImageId).collect();
    let dir = tempfile::tempdir().unwrap();
    let docs = make_stage1_corpus(
        &w,
        &pool,
        &Stage1CorpusConfig {
            docs: 50,
            ..Stage1CorpusConfig::default()
        },
    )
    .unwrap();
    write_stage1_corpus(dir.path(), &docs, w.vocab()).unwrap();
    assert_eq!(read_stage1_corpus(dir.path(), w.vocab()).unwrap(), docs);

    let pools = make_instruction_pools(
        &w,
        &pool,
        &InstructionPoolSizes {
            chatsearch: 20,
            qa: 20,
            edit: 20,
            ..InstructionPoolSizes::default()
        },
    )
    .unwrap();
    let c = InstructionCorpus::from_pools(&pools);
    write_instruction_corpus(dir.path(), &c).unwrap();
    assert_eq!(read_instruction_corpus(dir.path()).unwrap(), c);
}

#[test]
fn corrupt_corpus_line_is_a_schema_error() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("stage1.jsonl"), "{\"schema\":1,\"segments\":[{\"text\":\"red\"}]}\nnot json\n").unwrap();
    let e = read_stage1_corpus(dir.path(), w.vocab()).unwrap_err();
    assert!(matches!(e, SequenceError::Schema(ref m) if m.contains("line 2")), "{e}");
    std::fs::write(dir.path().join("stage1.jsonl"), "{\"schema\":9,\"segments\":[]}\n").unwrap();
    assert!(matches!(read_stage1_corpus(dir.path(), w.vocab()), Err(SequenceError::Schema(_))));
}
