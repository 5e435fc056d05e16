// Patch a small dataset, attach embeddings to the patch ids, select a
// coreset and build a replay mix from it.

use std::fs;
use std::path::Path;

use coresetkit::diversity;
use coresetkit::dq;
use coresetkit::embeddings::{read_embeddings, write_embeddings, EmbeddingMatrix, PatchId};
use coresetkit::listing::{self, CoresetFile, PatchLedger, SelectionMethod};
use coresetkit::patching::{self, PatchOptions};
use coresetkit::raster::{self, BitDepth, LabelMask, Raster};
use coresetkit::replay::{self, ReplaySource};

fn dataset(dir: &Path, prefix: &str, sizes: &[(usize, usize)]) {
    fs::create_dir_all(dir.join("images")).unwrap();
    fs::create_dir_all(dir.join("masks")).unwrap();
    for (i, &(h, w)) in sizes.iter().enumerate() {
        let samples = (0..h * w * 3).map(|v| (v % 251) as u16).collect();
        let img = Raster::new(h, w, 3, BitDepth::Eight, samples).unwrap();
        raster::write_raster_png(&img, dir.join("images").join(format!("{prefix}{i}.png"))).unwrap();
        let mut mask = LabelMask::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                if (r / 10 + c / 10) % 3 == 0 {
                    mask.set(r, c, (1 + r / 10 * 10 + c / 10) as u32);
                }
            }
        }
        raster::write_mask(&mask, dir.join("masks").join(format!("{prefix}{i}_masks"))).unwrap();
    }
}

fn embed(ledger: &PatchLedger, root: &Path) -> EmbeddingMatrix {
    // Stand-in features: mean intensity and foreground fraction per patch.
    let rows: Vec<Vec<f32>> = ledger
        .patches
        .iter()
        .map(|p| {
            let img = raster::read_raster(root.join(&p.image_file)).unwrap();
            let mask = raster::read_mask(root.join(&p.mask_file)).unwrap();
            let mean = img.samples.iter().map(|&v| v as f32).sum::<f32>() / img.samples.len() as f32;
            let fg = mask.labels.iter().filter(|&&l| l > 0).count() as f32 / mask.labels.len() as f32;
            vec![mean, fg, (p.row + p.col) as f32]
        })
        .collect();
    EmbeddingMatrix::from_rows(&rows, ledger.ids()).unwrap()
}

#[test]
fn patch_select_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    dataset(&root.join("cyto"), "c", &[(100, 70), (64, 64), (90, 128)]);
    dataset(&root.join("histo"), "h", &[(64, 96)]);
    let opts = PatchOptions { window: 48, stride: 24, grayscale: true };
    let cyto = patching::patch_directory(&root.join("cyto/images"), &root.join("cyto/masks"), &root.join("out/cyto"), &opts).unwrap();
    let histo = patching::patch_directory(&root.join("histo/images"), &root.join("histo/masks"), &root.join("out/histo"), &opts).unwrap();

    let dims = [(100, 70), (64, 64), (90, 128)];
    assert_eq!(cyto.patches.len(), patching::count_patches(&dims, 48, 24).unwrap());
    cyto.check_unique().unwrap();
    for p in &cyto.patches {
        let id: PatchId = p.id.parse().unwrap();
        assert_eq!((id.row, id.col), (p.row, p.col));
        let img = raster::read_raster(root.join("out/cyto").join(&p.image_file)).unwrap();
        assert_eq!((img.height, img.width, img.channels), (48, 48, 1));
    }
    assert_eq!(PatchLedger::read(root.join("out/cyto/patches.json")).unwrap(), cyto);

    let emb_path = root.join("cyto.emb");
    write_embeddings(&embed(&cyto, &root.join("out/cyto")), &emb_path).unwrap();
    let m = read_embeddings(&emb_path).unwrap();
    let bins = dq::form_bins(&m, 5).unwrap();
    bins.validate().unwrap();
    let sel = dq::sample_coreset(&bins, 0.1, 9).unwrap();
    let coreset = CoresetFile::new(SelectionMethod::Dq, &sel, &bins, m.ids());
    coreset.write(root.join("coreset.json")).unwrap();
    let coreset = CoresetFile::read(root.join("coreset.json")).unwrap();
    let (bins_back, sel_back) = coreset.resolve(m.ids()).unwrap();
    assert_eq!((bins_back, sel_back.clone()), (bins.clone(), sel));

    let stats = diversity::coverage(&m, &sel_back, &bins).unwrap();
    assert_eq!(stats.bin_occupancy, 1.0);

    let target = listing::read_subset_patches(root.join("out/histo/patches.json")).unwrap();
    assert_eq!(target, histo.ids());
    let mix = replay::compose_replay(&ReplaySource::Coreset(coreset.clone()), &target).unwrap();
    assert_eq!(mix.len(), coreset.selection.len() + histo.patches.len());
    listing::write_json(&mix, root.join("mix.json")).unwrap();
    assert_eq!(listing::read_subset_patches(root.join("mix.json")).unwrap(), mix.patches);
}
