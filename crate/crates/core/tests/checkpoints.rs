use std::fs;

use shardtrain::ckptstore::{self, shard_file_name, RunInfo};
use shardtrain::engine::{Activation, LayeredNet, NetLayout};
use shardtrain::error::Error;
use shardtrain::fsdp::{self, DenseState};
use shardtrain::rng::stream;

fn dense() -> DenseState {
    let layout = NetLayout {
        dims: vec![7, 5, 9, 3],
        activations: vec![Activation::Relu, Activation::Relu, Activation::None],
        n_prototypes: 4,
    };
    let net = LayeredNet::init(&layout, &mut stream(1, &[2])).unwrap();
    let mut d = DenseState::new(net);
    for (i, m) in d.momentum.iter_mut().enumerate() {
        m.iter_mut().enumerate().for_each(|(j, v)| *v = (i * 100 + j) as f64 * 0.5);
    }
    d
}

fn info() -> RunInfo {
    RunInfo {
        step: 7,
        seed: 3,
        config_hash: "abc".into(),
    }
}

#[test]
fn reshard_between_any_world_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = dense();
    for from in 1..=4 {
        let src = tmp.path().join(format!("from{from}"));
        for st in d.shard(from).unwrap() {
            ckptstore::save_sharded(&st, &info(), &src).unwrap();
        }
        let slices = tmp.path().join(format!("slices{from}"));
        ckptstore::consolidate_to_sliced(&src, &slices).unwrap();
        for to in 1..=4 {
            let dst = tmp.path().join(format!("to{from}_{to}"));
            ckptstore::shards_from_sliced(&slices, &dst, to).unwrap();
            let states: Vec<_> = (0..to)
                .map(|r| {
                    let (st, run) = ckptstore::load_sharded(&dst, r, to).unwrap();
                    assert_eq!(run, info());
                    st
                })
                .collect();
            let back = fsdp::consolidate(&states).unwrap();
            assert_eq!(back.net, d.net);
            assert_eq!(back.momentum, d.momentum);
        }
    }
}

#[test]
fn damaged_checkpoints_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ck");
    for st in dense().shard(3).unwrap() {
        ckptstore::save_sharded(&st, &info(), &dir).unwrap();
    }
    assert!(matches!(
        ckptstore::load_sharded(&dir, 0, 2),
        Err(Error::ReshardRequired { saved: 3, requested: 2 })
    ));

    let shard = dir.join(shard_file_name(1));
    let bytes = fs::read(&shard).unwrap();
    fs::write(&shard, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(ckptstore::load_sharded(&dir, 1, 3), Err(Error::Format { .. })));

    fs::remove_file(&shard).unwrap();
    assert!(matches!(ckptstore::load_sharded(&dir, 1, 3), Err(Error::MissingShard { rank: 1, .. })));
    assert!(ckptstore::consolidate_to_sliced(&dir, &tmp.path().join("s")).is_err());
}

#[test]
fn shard_bytes_do_not_depend_on_save_order() {
    let tmp = tempfile::tempdir().unwrap();
    let states = dense().shard(4).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for st in &states {
        ckptstore::save_sharded(st, &info(), &a).unwrap();
    }
    for st in states.iter().rev() {
        ckptstore::save_sharded(st, &info(), &b).unwrap();
    }
    for r in 0..4 {
        assert_eq!(fs::read(a.join(shard_file_name(r))).unwrap(), fs::read(b.join(shard_file_name(r))).unwrap());
    }
}
