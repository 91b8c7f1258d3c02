//! Back-projects a synthetic depth frame and checks the points land on the
//! rendered objects.

use instfuse::geometry::unproject_depth;
use instfuse::synthetic::{default_intrinsics, generate_scene, orbit_trajectory, render_frame};

fn main() -> instfuse::Result<()> {
    let scene = generate_scene(1, 4, 8)?;
    let poses = orbit_trajectory(&scene, 4)?;
    let k = default_intrinsics();
    let frame = render_frame(&scene, &poses[0], &k)?;
    let cloud = unproject_depth(&frame.depth, &k, &frame.pose, 0)?;
    println!("{} of {} pixels have depth", cloud.len(), k.width * k.height);

    let mut worst: f64 = 0.0;
    for (p, &(u, v)) in cloud.positions.iter().zip(&cloud.source_pixel) {
        let label = frame.mask.get(u, v);
        if label < 0 {
            continue;
        }
        let obj = scene.object(frame.mask.source_id(label as usize)).expect("rendered object");
        worst = worst.max(obj.surface_distance(p).abs());
    }
    println!("largest distance from a masked point to its object surface: {:.2} mm", worst * 1e3);
    Ok(())
}
