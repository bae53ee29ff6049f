//! Grids, partial definedness, bilinear sampling, and RTF round trips.
//!
//! Run with:
//!
//! ```text
//! cargo run --release --example rtf_maps
//! ```

use defrec::rastermap::{read_mask_rtf, write_mask_rtf, GridDomain, ParamSet, RasterMap};

fn main() {
    // ===== a map on a centered canonical grid =====

    // Frame-sized grids put the center pixel at canonical (0, 0) so the
    // same coordinates keep meaning the same surface point as the model
    // grows past the image borders.
    let domain = GridDomain::image_centered(8, 6);
    println!(
        "domain: {}x{} cells, canonical u in [{}, {}], v in [{}, {}]",
        domain.width,
        domain.height,
        domain.offset.0,
        domain.offset.0 + domain.width as i32 - 1,
        domain.offset.1,
        domain.offset.1 + domain.height as i32 - 1
    );

    // A smooth 3-channel field with one undefined cell, as if a
    // measurement dropped out there.
    let hole = (1, 1);
    let map = RasterMap::from_fn(domain, 3, |u, v| {
        if (u, v) == hole {
            return None;
        }
        let (x, y) = (u as f32, v as f32);
        Some(vec![x + 10.0 * y, x * y, 100.0 + x])
    });
    println!(
        "defined cells: {} of {} (hole at {:?})",
        map.defined().len(),
        domain.len(),
        hole
    );

    // ===== bilinear sampling respects definedness =====

    let mut out = [0.0f64; 3];
    assert!(map.sample_bilinear(-2.0, 1.0, &mut out));
    println!("sample at integer (-2, 1): {out:?} (exactly the stored cell)");

    assert!(map.sample_bilinear(-1.5, 0.25, &mut out));
    println!("sample at (-1.5, 0.25):   {out:?} (blend of 4 neighbors)");

    // Any query whose nonzero-weight neighborhood touches the hole is
    // undefined rather than silently extrapolated.
    assert!(!map.sample_bilinear(0.5, 1.0, &mut out));
    println!("sample at (0.5, 1.0): undefined, the hole has weight there");
    assert!(map.sample_bilinear(0.0, 1.0, &mut out));
    println!("sample at (0.0, 1.0): defined again, hole weight is zero");

    // ===== RTF round trip is bit-exact =====

    let dir = std::env::temp_dir().join("defrec_example_rtf");
    std::fs::create_dir_all(&dir).expect("create temp dir");
    let path = dir.join("field.rtf");
    map.write_rtf(&path).expect("write rtf");
    let back = RasterMap::read_rtf(&path).expect("read rtf");

    assert_eq!(back.domain(), map.domain());
    assert_eq!(back.channels(), map.channels());
    let mut identical = true;
    for (u, v) in map.defined().iter() {
        identical &= map.get(u, v) == back.get(u, v);
    }
    identical &= back.defined().len() == map.defined().len();
    println!(
        "round trip through {}: {}",
        path.display(),
        if identical { "bit-exact" } else { "MISMATCH" }
    );
    assert!(identical);

    // Masks (pure cell sets) have their own single-byte-per-cell format.
    let mask = ParamSet::from_fn(domain, |u, v| u * u + v * v <= 4);
    let mask_path = dir.join("disk.rtf");
    write_mask_rtf(&mask, &mask_path).expect("write mask");
    let mask_back = read_mask_rtf(&mask_path).expect("read mask");
    assert_eq!(mask.len(), mask_back.len());
    println!("mask round trip: {} cells preserved", mask_back.len());

    // ===== growing the grid =====

    // The canonical model expands when reprojected points land outside the
    // current rectangle; values and coordinates are preserved verbatim.
    let grown = domain.grown_to_include([(12, 0)]);
    let expanded = map.expand_to(grown).expect("expand");
    println!(
        "grown domain: {}x{} at offset {:?}, same {} defined cells",
        grown.width,
        grown.height,
        grown.offset,
        expanded.defined().len()
    );
    assert_eq!(expanded.get(-2, 1), map.get(-2, 1));
}
