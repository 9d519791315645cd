//! The communicator-grouping application: query the topology attributes of
//! the world communicator, then split it three ways — by site, by vendor
//! capability with a shared bucket for everyone else, and by vendor
//! capability with the rest opting out entirely. Prints the memberships so
//! the launcher-side test can check them.

use gridmp::{CommId, Runtime, SplitColor, WORLD};
use gridmp_acceptance::world_topology;

fn members_or_null(rt: &Runtime, comm: Option<CommId>) -> String {
    match comm {
        None => "null".to_string(),
        Some(c) => rt
            .comm_members(c)
            .unwrap()
            .iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join("+"),
    }
}

fn main() {
    let mut rt = gridmp::Runtime::init().unwrap_or_else(|e| {
        eprintln!("init failed: {e}");
        std::process::exit(7);
    });
    let me = rt.rank();
    let (depths, colors) = world_topology(&rt);

    let lan = rt.comm_split(WORLD, SplitColor::Color(colors[me][1]), 0).unwrap();
    let va_color = if depths[me] == 4 { colors[me][3] } else { -1 };
    let va = rt.comm_split(WORLD, SplitColor::Color(va_color), 0).unwrap();
    let vb_color = if depths[me] == 4 {
        SplitColor::Color(colors[me][3])
    } else {
        SplitColor::Undefined
    };
    let vb = rt.comm_split(WORLD, vb_color, 0).unwrap();

    println!(
        "GROUPS {me} LAN={} VA={} VB={}",
        members_or_null(&rt, lan),
        members_or_null(&rt, va),
        members_or_null(&rt, vb)
    );
    rt.finalize().unwrap();
}
