mod common;

use std::collections::HashMap;

use proptest::prelude::*;

use common::{boot, config};
use teeod::client::{Context, Direction, ImageSource, Operation, Origin, Param, Session};
use teeod::images;
use teeod_core::protocol::{ReturnCode, Uuid};
use teeod_core::tas::SHMEM16_PATTERN;

#[derive(Debug, Clone)]
enum Step {
    Open(usize),
    Invoke(usize, u32),
    Close(usize),
    Shm(usize, usize),
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        (0..3usize).prop_map(Step::Open),
        (0..6usize, any::<u32>()).prop_map(|(i, x)| Step::Invoke(i, x)),
        (0..6usize).prop_map(Step::Close),
        (0..6usize, 0..64usize).prop_map(|(i, n)| Step::Shm(i, n)),
    ]
}

fn catalogue() -> [(Uuid, Vec<u8>); 3] {
    [images::increment(), images::echo(), images::shmem16()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Random API sequences against a two-slot fabric agree with a model
    /// that tracks which TAs hold slots.
    #[test]
    fn api_sequences_follow_the_model(steps in prop::collection::vec(step(), 1..40)) {
        let fabric = boot(config(2));
        let ctx = Context::new(&fabric);
        let tas = catalogue();
        let mut sessions: Vec<(usize, Session)> = Vec::new();
        let mut held: HashMap<usize, usize> = HashMap::new();

        for s in steps {
            match s {
                Step::Open(t) => {
                    let (uuid, img) = &tas[t];
                    let r = ctx.open_session(*uuid, ImageSource::Bytes(img));
                    fabric.quiesce();
                    if held.contains_key(&t) || held.len() < 2 {
                        let sess = r.unwrap();
                        prop_assert!(sess.is_open());
                        *held.entry(t).or_default() += 1;
                        sessions.push((t, sess));
                    } else {
                        let e = r.unwrap_err();
                        prop_assert_eq!(e.code, ReturnCode::ERROR_OUT_OF_ENCLAVES);
                        prop_assert_eq!(e.origin, Origin::Fabric);
                    }
                }
                Step::Invoke(i, x) => {
                    let Some((t, sess)) = sessions.get(i % sessions.len().max(1)) else { continue };
                    let mut op = match t {
                        0 => Operation::new([Param::value_inout(x, 0), Param::None, Param::None, Param::None]),
                        _ => Operation::new([Param::value_in(x, 0), Param::value_out(), Param::None, Param::None]),
                    };
                    let r = ctx.invoke_command(sess, 0, &mut op);
                    if !sess.is_open() {
                        let e = r.unwrap_err();
                        prop_assert_eq!((e.code, e.origin), (ReturnCode::ERROR_BAD_PARAMETERS, Origin::Api));
                        continue;
                    }
                    match t {
                        0 => {
                            r.unwrap();
                            prop_assert_eq!(op.params[0].value(), Some((x.wrapping_add(1), 0)));
                        }
                        1 => {
                            r.unwrap();
                            prop_assert_eq!(op.params[1].value(), Some((x, 0)));
                        }
                        _ => prop_assert_eq!(r.unwrap_err().origin, Origin::TrustedApp),
                    }
                }
                Step::Close(i) => {
                    let n = sessions.len().max(1);
                    let Some((t, sess)) = sessions.get_mut(i % n) else { continue };
                    let was_open = sess.is_open();
                    ctx.close_session(sess).unwrap();
                    prop_assert!(!sess.is_open());
                    if was_open {
                        let n = held.get_mut(t).unwrap();
                        *n -= 1;
                        if *n == 0 {
                            held.remove(t);
                        }
                    }
                }
                Step::Shm(i, n) => {
                    let Some((t, sess)) = sessions.get(i % sessions.len().max(1)) else { continue };
                    let r = ctx.allocate_shared_memory(sess, n, Direction::Out);
                    if !sess.is_open() {
                        prop_assert!(r.is_err());
                        continue;
                    }
                    let mut shm = r.unwrap();
                    if *t == 2 && n >= 16 {
                        let mut op = Operation::new([Param::Memref(&mut shm), Param::None, Param::None, Param::None]);
                        ctx.invoke_command(sess, 0, &mut op).unwrap();
                        prop_assert_eq!(&shm.buffer[..16], &SHMEM16_PATTERN);
                    }
                    ctx.release_shared_memory(shm);
                }
            }
            let state = fabric.state();
            prop_assert_eq!((0..2).filter(|s| state.is_taken(*s)).count(), held.len());
        }
        for (_, mut s) in sessions {
            ctx.close_session(&mut s).unwrap();
        }
        fabric.audit().unwrap();
        prop_assert_eq!(fabric.load_count() > 0, fabric.events().iter().any(|l| l.starts_with("event=LOAD ")));
    }

    /// Values marshal through the mailbox and back unchanged.
    #[test]
    fn echo_round_trips_values(a in any::<u32>(), b in any::<u32>()) {
        let fabric = boot(config(1));
        let ctx = Context::new(&fabric);
        let (uuid, img) = images::echo();
        let mut s = ctx.open_session(uuid, ImageSource::Bytes(&img)).unwrap();
        let mut op = Operation::new([Param::value_in(a, b), Param::value_out(), Param::None, Param::None]);
        ctx.invoke_command(&s, 0, &mut op).unwrap();
        prop_assert_eq!(op.params[0].value(), Some((a, b)));
        prop_assert_eq!(op.params[1].value(), Some((a, b)));
        ctx.close_session(&mut s).unwrap();
    }
}

#[test]
fn out_buffers_do_not_carry_host_bytes_into_the_enclave() {
    let fabric = boot(config(1));
    let ctx = Context::new(&fabric);
    let (uuid, img) = images::shmem16();
    let mut s = ctx.open_session(uuid, ImageSource::Bytes(&img)).unwrap();
    let mut out = ctx.allocate_shared_memory(&s, 64, Direction::Out).unwrap();
    out.buffer.fill(0x5C);
    let mut op = Operation::new([Param::Memref(&mut out), Param::None, Param::None, Param::None]);
    ctx.invoke_command(&s, 0, &mut op).unwrap();
    assert!(!fabric.inspect(s.slot, |rt| rt.shm().contains(&0x5C)));
    assert!(!out.buffer.contains(&0x5C));
    ctx.close_session(&mut s).unwrap();
}

#[test]
fn shared_memory_from_another_session_is_refused() {
    let fabric = boot(config(2));
    let ctx = Context::new(&fabric);
    let (iu, inc) = images::increment();
    let (su, shm_img) = images::shmem16();
    let mut a = ctx.open_session(iu, ImageSource::Bytes(&inc)).unwrap();
    let mut b = ctx.open_session(su, ImageSource::Bytes(&shm_img)).unwrap();
    let mut foreign = ctx.allocate_shared_memory(&a, 16, Direction::Out).unwrap();
    let mut op = Operation::new([Param::Memref(&mut foreign), Param::None, Param::None, Param::None]);
    let e = ctx.invoke_command(&b, 0, &mut op).unwrap_err();
    assert_eq!((e.code, e.origin), (ReturnCode::ERROR_BAD_PARAMETERS, Origin::Api));
    ctx.close_session(&mut a).unwrap();
    ctx.close_session(&mut b).unwrap();
}

#[test]
fn handles_go_stale_after_the_slot_is_reused() {
    let fabric = boot(config(1));
    let ctx = Context::new(&fabric);
    let (iu, inc) = images::increment();
    let mut a = ctx.open_session(iu, ImageSource::Bytes(&inc)).unwrap();
    let stale = a.clone();
    ctx.close_session(&mut a).unwrap();
    fabric.quiesce();
    let mut b = ctx.open_session(iu, ImageSource::Bytes(&inc)).unwrap();
    let mut op = Operation::new([Param::value_inout(1, 0), Param::None, Param::None, Param::None]);
    let e = ctx.invoke_command(&stale, 0, &mut op).unwrap_err();
    assert_eq!(e.origin, Origin::Fabric);
    assert_eq!(e.code, ReturnCode::ERROR_ACCESS_DENIED);
    ctx.close_session(&mut b).unwrap();
}
