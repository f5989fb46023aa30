//! Independent reader for generated dialogues: parses the words back into
//! attribute constraints and scans the gallery exhaustively.

use super::{Attr, World};
use crate::sequence::{ChatDialogue, ImageId, Turn, IMAGE_PLACEHOLDER};

/// Attribute constraints implied by a run of turns. An image (from either
/// side) pins every attribute to its own values; later mentions override
/// single attributes.
pub fn constraints(world: &World, turns: &[Turn]) -> [Option<usize>; 6] {
    let mut c = [None; 6];
    for turn in turns {
        let pieces: Vec<&str> = turn.text.split(IMAGE_PLACEHOLDER).collect();
        for (i, piece) in pieces.iter().enumerate() {
            for w in piece.split_whitespace() {
                if let Some((a, v)) = world.lookup(w) {
                    c[a.index()] = Some(v);
                }
            }
            if let Some(&img) = turn.images.get(i) {
                let attrs = world.image(img).attrs;
                for a in Attr::ALL {
                    c[a.index()] = Some(attrs[a.index()]);
                }
            }
        }
    }
    c
}

/// Gallery images satisfying every constraint, in gallery order.
pub fn matching(world: &World, gallery: &[ImageId], c: &[Option<usize>; 6]) -> Vec<ImageId> {
    gallery
        .iter()
        .copied()
        .filter(|&id| {
            let attrs = world.image(id).attrs;
            c.iter().zip(attrs).all(|(want, have)| want.is_none_or(|w| w == have))
        })
        .collect()
}

/// Gallery images consistent with the full dialogue context.
pub fn resolve(world: &World, gallery: &[ImageId], context: &ChatDialogue) -> Vec<ImageId> {
    matching(world, gallery, &constraints(world, &context.turns))
}

/// Gallery images consistent with the final user turn alone.
pub fn resolve_last_round(world: &World, gallery: &[ImageId], context: &ChatDialogue) -> Vec<ImageId> {
    match context.turns.last() {
        Some(t) => matching(world, gallery, &constraints(world, std::slice::from_ref(t))),
        None => gallery.to_vec(),
    }
}
