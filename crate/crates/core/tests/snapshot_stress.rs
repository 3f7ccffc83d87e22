//! Readers racing a writer must always see one whole published version.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;

use dimrank_core::model::EntityKind;
use dimrank_core::store::SnapshotCell;
use dimrank_core::{Dims, ModelState};

const UPDATES: u64 = 10_000;
const READERS: usize = 4;
const READS_PER_READER: usize = 2_500;
const USERS: u64 = 16;

fn stamp(state: &mut ModelState, v: f32) {
    state.weights.w1_mut().fill(v);
    state.weights.b1_mut().fill(v);
    state.weights.w2_mut().fill(v);
    *state.weights.b2_mut() = v;
    for id in 0..USERS {
        state.users.get_mut(id).unwrap().fill(v);
    }
}

/// Every parameter and embedding value, which must all equal the version stamp.
fn values(state: &ModelState) -> impl Iterator<Item = f32> + '_ {
    let w = &state.weights;
    w.w1()
        .iter()
        .chain(w.b1())
        .chain(w.w2())
        .copied()
        .chain(std::iter::once(w.b2()))
        .chain(state.users.iter().flat_map(|(_, row)| row.iter().copied()))
}

#[test]
fn concurrent_reads_see_whole_versions() {
    let dims = Dims { user: 4, doc: 4, hidden: 8 };
    let mut state = ModelState::new(dims, 1);
    for id in 0..USERS {
        state.ensure(EntityKind::User, id, None);
    }
    let cell = Arc::new(SnapshotCell::default());
    let done = Arc::new(AtomicBool::new(false));

    let readers: Vec<_> = (0..READERS)
        .map(|_| {
            let cell = Arc::clone(&cell);
            thread::spawn(move || {
                let mut last = 0;
                let mut reads = 0;
                let mut distinct = 0;
                while reads < READS_PER_READER {
                    let Some(snap) = cell.current() else { continue };
                    let v = snap.version as f32;
                    assert!(values(&snap.state).all(|x| x == v), "mixed values in version {}", snap.version);
                    assert!(snap.version >= last, "version went backwards");
                    if snap.version != last {
                        distinct += 1;
                    }
                    last = snap.version;
                    reads += 1;
                }
                distinct
            })
        })
        .collect();

    let writer = {
        let cell = Arc::clone(&cell);
        let done = Arc::clone(&done);
        thread::spawn(move || {
            for v in 1..=UPDATES {
                stamp(&mut state, v as f32);
                let handle = cell.publish(state.clone());
                assert_eq!(handle.version, v);
            }
            done.store(true, Ordering::SeqCst);
        })
    };

    let distinct: usize = readers.into_iter().map(|r| r.join().unwrap()).sum();
    writer.join().unwrap();
    assert!(done.load(Ordering::SeqCst));
    assert_eq!(cell.version(), UPDATES);
    assert!(distinct > 1, "readers never observed an update");
}
