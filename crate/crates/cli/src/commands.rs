use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tplconv::bench::{bench_csv, inversions, run_bench, two_stage_medians, BenchConfig, Impl};
use tplconv::cost::{network_report, template_config_cost, CostReport};
use tplconv::equiv::run_sweep;
use tplconv::io::{load_network, save_network};
use tplconv::nn::{
    load_cifar10_dir, make_synthetic_dataset, metrics_csv, softmax_cross_entropy, train as train_network, Dataset,
    Layer, Network,
};
use tplconv::pruning::{apply_plan, build_plan, current_kept, FilterGrads, PruneSchedule, PruningPlan};
use tplconv::viz::{grids_csv, render_layer, GRIDS_CSV_HEADER, VARIANTS};

use crate::config::{ConvertSection, DataSection, EquivSection, PruneSection, TrainSection};
use crate::{write_file, Failure, Outcome};

fn create_dir(path: &Path) -> Outcome {
    fs::create_dir_all(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

pub fn equiv_check(section: &EquivSection, seed: u64, out: &Path) -> Outcome {
    let cases = run_sweep(section.configs, seed, section.inject_fault)?;
    let mut csv = String::from("case,seed,in_channels,out_channels,templates,kernel,groups,stride,padding,rel_dev,passed\n");
    for case in &cases {
        let c = &case.config;
        println!("{} {}", if case.passed() { "ok  " } else { "FAIL" }, case.describe());
        csv += &format!(
            "{},{},{},{},{},{},{},{},{},{:e},{}\n",
            case.index,
            case.seed,
            c.in_channels,
            c.out_channels,
            case.templates,
            c.kernel,
            c.groups,
            c.stride,
            c.padding,
            case.relative_deviation(),
            case.passed()
        );
    }
    write_file(&out.join("equiv.csv"), csv)?;
    let failed = cases.iter().filter(|c| !c.passed()).count();
    match cases.iter().find(|c| !c.passed()) {
        Some(first) => {
            println!(
                "{failed} of {} cases failed; first failing seed {} (rerun with --configs 1 --seed {})",
                cases.len(),
                first.seed,
                first.seed
            );
            Err(Failure::Assertion(format!("equivalence failed: {}", first.describe())))
        }
        None => {
            println!("all {} cases agree", cases.len());
            Ok(())
        }
    }
}

/// Train and test splits described by `data`.
fn load_data(data: &DataSection, seed: u64) -> Result<(Dataset, Option<Dataset>), Failure> {
    if data.synthetic {
        let all = make_synthetic_dataset(data.classes, data.samples, seed)?;
        if data.val_fraction > 0.0 {
            let (train, val) = all.split_off(data.val_fraction);
            return Ok((train, Some(val)));
        }
        return Ok((all, None));
    }
    let dir = data
        .dir
        .as_ref()
        .ok_or_else(|| Failure::Usage("a data directory is required when synthetic data is off".into()))?;
    let (train, test) = load_cifar10_dir(dir, data.max_train, data.max_test)?;
    Ok((train, Some(test)))
}

fn kept_plan(net: &Network) -> PruningPlan {
    let entries = net
        .conv_layer_ids()
        .into_iter()
        .map(|id| {
            let kept = current_kept(&net.layers[id]).expect("conv layer");
            let filters = net.filters(id).expect("conv layer").batch();
            tplconv::pruning::PlanEntry {
                layer: id,
                filters,
                rate: 1.0 - kept.len() as f64 / filters as f64,
                kept,
            }
        })
        .collect();
    PruningPlan { entries }
}

pub fn train(section: &TrainSection, seed: u64, out: &Path) -> Outcome {
    let (data, val) = load_data(&section.data, seed)?;
    let [_, c, h, _] = data.images.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::small_cnn(c, &section.model.widths, data.classes, h, &mut rng)?;
    let (net, history) = train_network(net, &data, val.as_ref(), &section.training)?;
    for m in &history {
        println!(
            "epoch {:>3}  loss {:.4}  train_acc {:.4}  val_acc {}  params {}  macs {}  templates {:?}",
            m.epoch,
            m.train_loss,
            m.train_acc,
            m.val_acc.map_or("-".to_string(), |a| format!("{a:.4}")),
            m.total_params,
            m.total_macs,
            m.templates
        );
    }
    write_file(&out.join("metrics.csv"), metrics_csv(&history))?;
    write_file(&out.join("plan.txt"), kept_plan(&net).to_text())?;
    save_network(&out.join("checkpoint"), &net)?;
    Ok(())
}

fn report_line(label: &str, r: &CostReport) {
    println!(
        "{label}: conv MACs {} -> {}  flops ratio {:.4}  params ratio {:.4}",
        r.baseline.macs,
        r.compressed.macs,
        r.flops_reduction(),
        r.params_reduction()
    );
}

pub fn prune(section: &PruneSection, seed: u64, out: &Path) -> Outcome {
    let path = section
        .checkpoint
        .as_ref()
        .ok_or_else(|| Failure::Usage("prune needs --checkpoint".into()))?;
    let mut net = load_network(path)?;
    let (data, _) = load_data(&section.data, seed)?;
    let n = section.probe_batch.min(data.len()).max(1);
    let probe = data.subset(&(0..n).collect::<Vec<_>>(), data.split);
    let [_, c, h, w] = probe.images.dims();
    let before_report = network_report(&net, [c, h, w])?;
    let (before, tape) = net.forward(&probe.images, false)?;

    let grads = if section.measure.needs_grads() {
        let classes = before.channels();
        let labels: Vec<usize> = probe.labels.iter().map(|l| l % classes).collect();
        let (logits, tape) = net.forward(&probe.images, true)?;
        let (_, grad_logits) = softmax_cross_entropy(&logits, &labels)?;
        let g = net.backward(&tape, &grad_logits, false)?;
        let map: FilterGrads = g
            .layers
            .into_iter()
            .enumerate()
            .filter_map(|(i, l)| l.filter.map(|f| (i, f)))
            .collect();
        Some(map)
    } else {
        None
    };
    drop(tape);

    let schedule = PruneSchedule {
        target_rate: section.rate,
        ramp_epochs: 0,
        min_templates: section.min_templates,
    };
    let plan = build_plan(&net, section.measure, 0, &schedule, grads.as_ref())?;
    let changed = apply_plan(&mut net, &plan, &section.convert)?;
    let (after, _) = net.forward(&probe.images, false)?;
    let after_report = network_report(&net, [c, h, w])?;

    report_line("before", &before_report);
    report_line("after ", &after_report);
    println!(
        "rewrote {} layers; probe logits max deviation {:.6e} over {n} images",
        changed.len(),
        after.max_abs_diff(&before)
    );
    write_file(&out.join("plan.txt"), plan.to_text())?;
    write_file(&out.join("cost_report.csv"), after_report.to_csv())?;
    save_network(&out.join("checkpoint"), &net)?;
    Ok(())
}

pub fn bench(config: &BenchConfig, out: &Path) -> Outcome {
    let rows = run_bench(config)?;
    println!("{:>6} {:>10} {:>9} {:>12} {:>12} {:>12}", "rate", "impl", "templates", "median_us", "p10", "p90");
    for r in &rows {
        println!(
            "{:>6} {:>10} {:>9} {:>12.1} {:>12.1} {:>12.1}",
            r.rate,
            r.imp.name(),
            r.templates,
            r.median_us,
            r.p10_us,
            r.p90_us
        );
    }
    let medians = two_stage_medians(&rows);
    println!("two-stage time increases with rate {} time(s)", inversions(&medians));
    for r in rows.iter().filter(|r| r.imp == Impl::TwoStage) {
        println!(
            "rate {}: gather {:.1} us, template {:.1} us, transform {:.1} us, other {:.1} us",
            r.rate,
            r.stage_gather_us,
            r.stage_template_us,
            r.stage_transform_us,
            r.stage_other_us()
        );
    }
    write_file(&out.join("bench.csv"), bench_csv(&rows))
}

/// The network named by `section` before and after its one-shot conversion,
/// plus the input dims.
fn converted(section: &ConvertSection, seed: u64) -> Result<(Network, Network, [usize; 3]), Failure> {
    let original = match &section.checkpoint {
        Some(path) => load_network(path)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Network::small_cnn(
                section.in_channels,
                &section.widths,
                section.classes,
                section.image_size,
                &mut rng,
            )?
        }
    };
    if section.measure.needs_grads() {
        return Err(Failure::Usage(format!(
            "saliency `{}` needs gradients; convert with the prune command instead",
            section.measure
        )));
    }
    let schedule = PruneSchedule {
        target_rate: section.rate,
        ramp_epochs: 0,
        min_templates: section.min_templates,
    };
    let plan = build_plan(&original, section.measure, 0, &schedule, None)?;
    let mut net = original.clone();
    apply_plan(&mut net, &plan, &section.convert)?;
    let input = [section.in_channels, section.image_size, section.image_size];
    Ok((original, net, input))
}

/// Checks every template row against the closed form and the totals against
/// the row sums.
fn check_report(net: &Network, report: &CostReport) -> Result<(), String> {
    for row in &report.rows {
        if let Layer::TemplateConv(t) = &net.layers[row.layer] {
            let closed = template_config_cost(t.layer.config(), row.templates, row.out_h, row.out_w)
                .map_err(|e| e.to_string())?;
            if closed != row.compressed {
                return Err(format!(
                    "layer {}: closed form {:?} differs from counted {:?}",
                    row.layer, closed, row.compressed
                ));
            }
        }
    }
    let macs: u64 = report.rows.iter().map(|r| r.compressed.macs).sum();
    let params: u64 = report.rows.iter().map(|r| r.compressed.params).sum();
    if macs != report.compressed.macs || params != report.compressed.params {
        return Err("report totals differ from the sum of its rows".into());
    }
    Ok(())
}

pub fn cost_report(section: &ConvertSection, seed: u64, out: &Path) -> Outcome {
    let (_, net, input) = converted(section, seed)?;
    let report = network_report(&net, input)?;
    print!("{}", report.to_table());
    write_file(&out.join("cost_report.csv"), report.to_csv())?;
    write_file(&out.join("cost_report.txt"), report.to_table())?;
    check_report(&net, &report).map_err(Failure::Assertion)
}

pub fn viz_filters(section: &ConvertSection, seed: u64, out: &Path) -> Outcome {
    let (original, net, _) = converted(section, seed)?;
    let dir = out.join("filters");
    create_dir(&dir)?;
    let mut csv = String::from(GRIDS_CSV_HEADER);
    csv.push('\n');
    for id in net.conv_layer_ids() {
        let before = original.filters(id).expect("conv layer");
        let after = net.filters(id).expect("conv layer");
        let kept = current_kept(&net.layers[id]).expect("conv layer");
        let rendered = render_layer(&before, &after, &kept)?;
        for (variant, image) in VARIANTS.iter().zip(&rendered.images) {
            write_file(&dir.join(format!("layer{id:02}_{variant}.pgm")), image)?;
        }
        csv += &grids_csv(id, &rendered.grids);
        println!("layer {id}: {} filters, {} kept", before.batch(), kept.len());
    }
    write_file(&out.join("filters.csv"), csv)
}
