use candle_core::{DType, Device, Tensor};
use cvsr_core::config::PipelineConfig;
use cvsr_core::degrade::{compress_sim, degrade, DegradationSpec};
use cvsr_core::diffusion::{p_step, q_sample, NoiseSchedule, SamplerMode};
use cvsr_core::frame::{Frame, VideoClip};
use cvsr_core::guidance::{guide_latents, motion_error, FlowPair, GuidanceConfig};
use cvsr_core::metrics::{psnr_y, ssim_y};
use cvsr_core::recon::{channel_stats, color_correct};
use cvsr_core::rng::{gaussian, seeded};
use cvsr_core::warp::{warp_frame, zero_flow, FlowField};
use cvsr_core::Model;
use proptest::prelude::*;
use rand::Rng;

fn random_frame(seed: u64, h: usize, w: usize, lo: f32, hi: f32) -> Frame {
    let mut rng = seeded(seed);
    Frame::from_shape_fn((h, w, 3), |_| rng.random_range(lo..hi))
}

fn vals(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
}

fn random_flows(n: usize, h: usize, w: usize, seed: u64, amp: f32) -> FlowPair {
    let mut rng = seeded(seed);
    let mut field = || FlowField::from_shape_fn((h, w, 2), |_| rng.random_range(-amp..amp));
    FlowPair {
        forward: (0..n - 1).map(|_| field()).collect(),
        backward: (0..n - 1).map(|_| field()).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn alpha_bar_strictly_decreases(steps in 2usize..1200, b0 in 1e-5f64..1e-2, span in 1e-4f64..0.5) {
        let s = NoiseSchedule::linear(steps, b0, (b0 + span).min(0.999)).unwrap();
        for t in 1..steps {
            prop_assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
        }
    }

    #[test]
    fn ddim_step_is_bit_deterministic(seed in any::<u64>(), t in 2usize..1000) {
        let s = NoiseSchedule::linear(1000, 0.00085, 0.012).unwrap();
        let mut rng = seeded(seed);
        let x = gaussian(&mut rng, (2, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let e = gaussian(&mut rng, (2, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let st = cvsr_core::StepIndex { t, prev: t / 2 };
        let a = p_step(&x, st, &e, &s, SamplerMode::Ddim, None).unwrap();
        let b = p_step(&x, st, &e, &s, SamplerMode::Ddim, None).unwrap();
        prop_assert_eq!(vals(&a), vals(&b));
    }

    #[test]
    fn oracle_ddim_trajectory_recovers_the_sample(seed in any::<u64>()) {
        let s = NoiseSchedule::linear(1000, 0.00085, 0.012).unwrap();
        let dev = Device::Cpu;
        let mut rng = seeded(seed);
        let x0 = gaussian(&mut rng, (4, 8, 8), DType::F64, &dev).unwrap().affine(0.3, 0.0).unwrap();
        let eps = gaussian(&mut rng, (4, 8, 8), DType::F64, &dev).unwrap();
        let mut x = q_sample(&x0, 1000, &eps, &s).unwrap().x_t;
        for step in s.sampling_plan(50) {
            let ab = s.alpha_bar(step.t);
            let oracle = (&x - x0.affine(ab.sqrt(), 0.0).unwrap()).unwrap().affine(1.0 / (1.0 - ab).sqrt(), 0.0).unwrap();
            x = p_step(&x, step, &oracle, &s, SamplerMode::Ddim, None).unwrap();
        }
        let err = (x - &x0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        prop_assert!(err <= 1e-4, "max-abs error {}", err);
    }

    #[test]
    fn degradation_is_deterministic_and_bounded(seed in any::<u64>(), q in 0u32..=51) {
        let frames: Vec<Frame> = (0..2).map(|i| random_frame(seed ^ i, 16, 16, 0.0, 1.0)).collect();
        let clip = VideoClip::new(frames).unwrap();
        let spec = DegradationSpec::default().with_quality(q);
        let a = degrade(&clip, &spec).unwrap();
        let b = degrade(&clip, &spec).unwrap();
        prop_assert_eq!(&a, &b);
        for f in &a.frames {
            prop_assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(f.dim(), (4, 4, 3));
        }
        let c = compress_sim(&clip, &spec).unwrap();
        prop_assert!(c.frames.iter().all(|f| f.iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn ssim_of_a_frame_with_itself_is_one(seed in any::<u64>()) {
        let a = random_frame(seed, 16, 16, 0.0, 1.0);
        prop_assert!((ssim_y(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = random_frame(seed.wrapping_add(1), 16, 16, 0.0, 1.0);
        prop_assert!(ssim_y(&a, &b).unwrap().abs() <= 1.0);
    }

    #[test]
    fn psnr_never_rises_with_noise_amplitude(seed in any::<u64>()) {
        let gt = random_frame(seed, 12, 12, 0.2, 0.8);
        let noise = random_frame(seed.wrapping_mul(3), 12, 12, -1.0, 1.0);
        let mut last = f64::INFINITY;
        for amp in [0.001f32, 0.01, 0.05, 0.1, 0.2] {
            let noisy = &gt + &noise.mapv(|v| v * amp);
            let p = psnr_y(&noisy, &gt).unwrap();
            prop_assert!(p <= last);
            last = p;
        }
    }

    #[test]
    fn color_correction_matches_reference_statistics(seed in any::<u64>()) {
        let sr = random_frame(seed, 10, 10, 0.3, 0.7);
        let reference = random_frame(seed ^ 0x55, 10, 10, 0.4, 0.6);
        let out = color_correct(&sr, &reference).unwrap();
        for ((m, s), (mr, sr_)) in channel_stats(&out).into_iter().zip(channel_stats(&reference)) {
            prop_assert!((m - mr).abs() <= 1e-5);
            prop_assert!((s - sr_).abs() <= 1e-4);
        }
    }

    #[test]
    fn guided_step_never_raises_motion_energy(seed in any::<u64>(), sigma2 in 1e-4f64..1.0) {
        let z = gaussian(&mut seeded(seed), (3, 4, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let flows = random_flows(3, 4, 4, seed ^ 7, 1.5);
        let (out, st) = guide_latents(&z, sigma2, Some(&flows), &GuidanceConfig::default()).unwrap();
        let before = motion_error(&z, &flows, false).unwrap().to_scalar::<f32>().unwrap();
        let after = motion_error(&out, &flows, false).unwrap().to_scalar::<f32>().unwrap();
        prop_assert!(after <= before);
        prop_assert!(st.e_after <= st.e_before);
    }

    #[test]
    fn zero_flow_warp_is_identity(seed in any::<u64>()) {
        let f = random_frame(seed, 7, 9, 0.0, 1.0);
        prop_assert_eq!(warp_frame(&f, &zero_flow(7, 9)).unwrap(), f);
    }

    #[test]
    fn section_order_does_not_change_the_config_hash(perm in Just(()).prop_perturb(|_, mut rng| {
        let mut order: Vec<usize> = (0..4).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        order
    })) {
        let sections = [
            "[fusion]\nomega = 0.5\n",
            "[capm]\nk = 3\n",
            "[schedule]\nsampling_steps = 20\n",
            "[train]\nbatch_clips = 2\n",
        ];
        let canonical: String = sections.concat();
        let shuffled: String = perm.iter().map(|&i| sections[i]).collect();
        let a = PipelineConfig::from_toml_str(&format!("seed = 3\n{canonical}")).unwrap();
        let b = PipelineConfig::from_toml_str(&format!("seed = 3\n{shuffled}")).unwrap();
        prop_assert_eq!(a.hash(), b.hash());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    #[test]
    fn encode_denoise_decode_preserves_frame_shape(hu in 1usize..=3, wu in 1usize..=3, n in 1usize..=3) {
        let cfg = PipelineConfig::tiny();
        let m = Model::new(&cfg, 1).unwrap();
        let (h, w) = (16 * hu, 16 * wu);
        let x = Tensor::rand(0f32, 1.0, (n, 3, h, w), &Device::Cpu).unwrap();
        let (z, enc) = m.vae.encode_with_features(&x).unwrap();
        let eps = m.predict_noise(&z, &vec![10; n], Some(&z), true).unwrap();
        prop_assert_eq!(eps.dims(), z.dims());
        let out = m.decode_full(&z, Some(&enc), true, true, Some(0.5)).unwrap();
        prop_assert_eq!(out.dims(), &[n, 3, h, w]);
    }
}
