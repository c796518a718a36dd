use fsdet_core::boxes::BBox;
use fsdet_core::dataset::parse_annotations;
use fsdet_core::fixtures::{generate_fixture, render_fixture, FixtureSpec, BACKGROUND_BAND};

fn spec(seed: u64) -> FixtureSpec {
    FixtureSpec {
        n_classes: 4,
        n_images: 24,
        image_size: 96,
        objects_per_image: (1, 3),
        seed,
    }
}

#[test]
fn written_fixture_parses_back_to_the_rendered_one() {
    let dir = tempfile::tempdir().unwrap();
    let written = generate_fixture(&spec(4), dir.path()).unwrap();
    let parsed = parse_annotations(dir.path()).unwrap();
    assert!(parsed.failures.is_empty(), "{:?}", parsed.failures);
    assert_eq!(parsed.vocabulary, written.vocabulary);
    assert_eq!(parsed.images.len(), written.images.len());
    for (p, w) in parsed.images.iter().zip(&written.images) {
        p.validate(parsed.vocabulary.len()).unwrap();
        assert_eq!(p.image_id, w.image_id);
        assert_eq!(p.labels, w.labels);
        assert_eq!(p.boxes, w.boxes);
        // PNG is lossless
        assert_eq!(p.pixels, w.pixels);
    }
}

#[test]
fn boxes_are_tight_around_the_drawn_pixels() {
    let fx = render_fixture(&spec(5)).unwrap();
    let mut checked = 0;
    for (im, rec) in fx.images.iter().zip(&fx.manifest.images) {
        for obj in &rec.objects {
            // object colours always leave the background band in some channel
            assert!(obj.color.iter().any(|&c| c < BACKGROUND_BAND.0 || c > BACKGROUND_BAND.1));
            let b = obj.bbox;
            let (w, h) = (im.width() as i64, im.height() as i64);
            let mut hit: Option<(i64, i64, i64, i64)> = None;
            // search one pixel beyond the box; neighbours keep a wider gap
            for y in (b.y1 as i64 - 1).max(0)..(b.y2 as i64 + 1).min(h) {
                for x in (b.x1 as i64 - 1).max(0)..(b.x2 as i64 + 1).min(w) {
                    if im.pixels.get_pixel(x as u32, y as u32).0 == obj.color {
                        hit = Some(match hit {
                            None => (x, y, x, y),
                            Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                        });
                    }
                }
            }
            let (x0, y0, x1, y1) = hit.expect("object pixels");
            assert_eq!(b, BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64), "{}", rec.image_id);
            checked += 1;
        }
    }
    assert!(checked >= 24);
}

#[test]
fn generation_is_byte_identical_for_a_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_fixture(&spec(6), a.path()).unwrap();
    generate_fixture(&spec(6), b.path()).unwrap();
    let mut files = 0;
    for sub in ["images", "annotations"] {
        let mut names: Vec<_> = std::fs::read_dir(a.path().join(sub))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        for n in names {
            let x = std::fs::read(a.path().join(sub).join(&n)).unwrap();
            let y = std::fs::read(b.path().join(sub).join(&n)).unwrap();
            assert_eq!(x, y, "{sub}/{n:?}");
            files += 1;
        }
    }
    assert_eq!(files, 48);
    assert_eq!(
        std::fs::read(a.path().join("manifest.json")).unwrap(),
        std::fs::read(b.path().join("manifest.json")).unwrap()
    );
    let other = render_fixture(&spec(7)).unwrap();
    let first = render_fixture(&spec(6)).unwrap();
    assert_ne!(other.images[0].pixels, first.images[0].pixels);
}

#[test]
fn every_class_appears_in_a_default_sized_fixture() {
    let fx = render_fixture(&FixtureSpec {
        n_images: 40,
        ..spec(8)
    })
    .unwrap();
    for c in fx.vocabulary.ids() {
        assert!(fx.images.iter().any(|im| im.labels.contains(&c)), "{c}");
    }
}
