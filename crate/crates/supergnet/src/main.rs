use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use supergnet::eval::{evaluate, read_dataset, TextField};
use supergnet::image_io::{export_image, ImageFormat};
use supergnet::model_file::{Model, ModelError};
use supergnet::pipeline::{Classifier, DEVICE_REFERENCE_MS};
use supergnet::reference_models::{ink_model, random_gnetfc, DBPEDIA_LABELS};
use supergnet::repl::{format_result, run_repl};
use supergnet_core::engine::{NetworkGraph, CHIP_BUDGET_BYTES};
use supergnet_core::fontkit::BitmapFont;
use supergnet_core::gnetfc::{build_gnetfc, memory_report, ArchSpec, StorageMode, MEGABYTE};
use supergnet_core::superchar::{render_text, CanvasSpec, Mode};

#[derive(Parser)]
#[command(name = "supergnet", version, about = "Super Characters text classification on a simulated CNN accelerator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify one text.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        canvas: CanvasArgs,
        /// Words are joined with single spaces.
        #[arg(required = true)]
        text: Vec<String>,
    },
    /// Evaluate a labeled CSV (class_index,title,body; 1-based classes).
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        json: bool,
        /// Text to classify: title+body, title or body.
        #[arg(long, default_value = "title+body")]
        field: TextField,
        #[command(flatten)]
        canvas: CanvasArgs,
    },
    /// Interactive loop on standard input.
    Repl {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        canvas: CanvasArgs,
    },
    /// Render a Super Characters image (.pgm or .png).
    Render {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[command(flatten)]
        canvas: CanvasArgs,
        text: Vec<String>,
    },
    /// Memory and compression report.
    Report {
        #[command(flatten)]
        source: GraphSource,
        #[arg(long)]
        json: bool,
    },
    /// Check operator legality and the on-chip memory budget.
    Validate {
        #[command(flatten)]
        source: GraphSource,
    },
    /// Print an architecture config (key=value).
    Arch {
        /// Narrow desk-scale widths.
        #[arg(long)]
        desk: bool,
        #[arg(long, default_value_t = 14)]
        classes: usize,
    },
    /// Write a model file with seeded random weights, or the hand-built
    /// ink-counting model.
    Init {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, conflicts_with = "ink")]
        arch: Option<PathBuf>,
        /// Comma-separated labels; defaults to the DBpedia classes for
        /// 14-class models.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ink: bool,
    },
}

#[derive(Args)]
struct CanvasArgs {
    #[arg(long, value_enum, default_value = "sew")]
    mode: ModeArg,
    /// BDF font; the embedded 8×8 ASCII font otherwise.
    #[arg(long)]
    font: Option<PathBuf>,
    /// Canvas side in pixels.
    #[arg(long, default_value_t = 224)]
    canvas: usize,
    /// Token grid as ROWSxCOLS.
    #[arg(long, default_value = "8x8", value_parser = parse_grid)]
    grid: (usize, usize),
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct GraphSource {
    #[arg(long)]
    model: Option<PathBuf>,
    /// key=value architecture config (structure only).
    #[arg(long)]
    arch: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sew,
    Cjk,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once(['x', 'X']).ok_or("expected ROWSxCOLS")?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad grid size {v:?}"));
    Ok((num(r)?, num(c)?))
}

enum Failure {
    Usage(String),
    Data(String),
    Model(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Model(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Model(m) => m,
        }
    }
}

fn model_err(path: &Path) -> impl Fn(ModelError) -> Failure + '_ {
    move |e| Failure::Model(format!("{}: {e}", path.display()))
}

fn load(path: &Path) -> Result<Model, Failure> {
    Model::load(path).map_err(model_err(path))
}

impl CanvasArgs {
    fn mode(&self) -> Mode {
        match self.mode {
            ModeArg::Sew => Mode::Sew,
            ModeArg::Cjk => Mode::Cjk,
        }
    }

    fn spec(&self, channels: usize) -> Result<CanvasSpec, Failure> {
        let (rows, cols) = self.grid;
        let spec = CanvasSpec::with_grid(self.canvas, rows, cols).map_err(|e| Failure::Usage(e.to_string()))?;
        let spec = CanvasSpec { channels, ..spec };
        spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        Ok(spec)
    }

    fn font(&self) -> Result<BitmapFont, Failure> {
        match &self.font {
            None => Ok(BitmapFont::embedded()),
            Some(p) => {
                let bytes = std::fs::read(p).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?;
                BitmapFont::parse_bdf(&bytes).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))
            }
        }
    }
}

fn classifier<'a>(model: &'a Model, font: &'a BitmapFont, canvas: &CanvasArgs) -> Result<Classifier<'a>, Failure> {
    let spec = canvas.spec(model.graph.input_shape.0)?;
    Classifier::new(model, font, spec, canvas.mode()).map_err(|e| Failure::Usage(e.to_string()))
}

fn read_arch(path: &Path) -> Result<ArchSpec, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    ArchSpec::from_kv_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn load_graph(source: &GraphSource) -> Result<NetworkGraph, Failure> {
    match (&source.model, &source.arch) {
        (Some(m), _) => Ok(load(m)?.graph),
        (None, Some(a)) => build_gnetfc(&read_arch(a)?).map_err(|e| Failure::Model(e.to_string())),
        (None, None) => Err(Failure::Usage(String::from("--model or --arch is required"))),
    }
}

#[derive(Serialize)]
struct LayerRow {
    layer: usize,
    in_channels: usize,
    out_channels: usize,
    bits: u32,
    coefficients: usize,
    packed_bytes: usize,
    paper_bytes: usize,
}

#[derive(Serialize)]
struct ReportJson {
    layers: Vec<LayerRow>,
    coefficients: usize,
    float32_bytes: usize,
    packed_bytes: usize,
    paper_bytes: usize,
    packed_compression: f64,
    paper_compression: f64,
    activation_peak_bytes: usize,
    on_chip_bytes: usize,
    budget_bytes: usize,
    fits_budget: bool,
}

fn report(graph: &NetworkGraph, json: bool, out: &mut impl Write) -> io::Result<()> {
    let r = memory_report(graph, StorageMode::Packed);
    let doc = ReportJson {
        layers: r
            .layers
            .iter()
            .map(|l| LayerRow {
                layer: l.layer,
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                bits: l.bits.bits(),
                coefficients: l.coefficients,
                packed_bytes: l.packed_bytes,
                paper_bytes: l.paper_bytes,
            })
            .collect(),
        coefficients: r.coefficients(),
        float32_bytes: r.float32_bytes(),
        packed_bytes: r.packed_bytes(),
        paper_bytes: r.paper_bytes(),
        packed_compression: r.packed_compression(),
        paper_compression: r.paper_compression(),
        activation_peak_bytes: r.activation_peak_bytes,
        on_chip_bytes: r.on_chip_bytes(),
        budget_bytes: r.budget_bytes,
        fits_budget: r.fits_budget(),
    };
    if json {
        return writeln!(out, "{}", serde_json::to_string_pretty(&doc).expect("report serializes"));
    }
    let mb = |b: usize| b as f64 / MEGABYTE;
    writeln!(out, "{:>5} {:>6} {:>6} {:>4} {:>12} {:>12} {:>12}", "layer", "c_in", "c_out", "bits", "coeffs", "packed_B", "paper_B")?;
    for l in &doc.layers {
        writeln!(
            out,
            "{:>5} {:>6} {:>6} {:>4} {:>12} {:>12} {:>12}",
            l.layer, l.in_channels, l.out_channels, l.bits, l.coefficients, l.packed_bytes, l.paper_bytes
        )?;
    }
    writeln!(out, "coefficients:        {}", doc.coefficients)?;
    writeln!(out, "float32:             {} B ({:.2} MB)", doc.float32_bytes, mb(doc.float32_bytes))?;
    writeln!(out, "packed:              {} B ({:.2} MB, {:.1}x)", doc.packed_bytes, mb(doc.packed_bytes), doc.packed_compression)?;
    writeln!(out, "paper accounting:    {} B ({:.2} MB, {:.1}x)", doc.paper_bytes, mb(doc.paper_bytes), doc.paper_compression)?;
    writeln!(out, "peak activations:    {} B", doc.activation_peak_bytes)?;
    writeln!(
        out,
        "on-chip:             {} B of {} B budget ({})",
        doc.on_chip_bytes,
        doc.budget_bytes,
        if doc.fits_budget { "fits" } else { "exceeds" }
    )
}

fn run(cli: Cli) -> Result<(), Failure> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let io_err = |e: io::Error| Failure::Data(e.to_string());
    match cli.command {
        Command::Classify { model, canvas, text } => {
            let m = load(&model)?;
            let font = canvas.font()?;
            let c = classifier(&m, &font, &canvas)?;
            let result = c.classify(&text.join(" ")).map_err(|e| Failure::Data(e.to_string()))?;
            let (p, i, t) = DEVICE_REFERENCE_MS;
            writeln!(out, "{}", format_result(&result)).map_err(io_err)?;
            writeln!(out, "device reference ms: preprocess {p} inference {i} total {t}").map_err(io_err)?;
        }
        Command::Eval { model, data, limit, json, field, canvas } => {
            let m = load(&model)?;
            let font = canvas.font()?;
            let c = classifier(&m, &font, &canvas)?;
            let file = File::open(&data).map_err(|e| Failure::Data(format!("{}: {e}", data.display())))?;
            let classes = m.num_classes().unwrap_or(0);
            let samples = read_dataset(BufReader::new(file), classes, field, limit)
                .map_err(|e| Failure::Data(format!("{}: {e}", data.display())))?;
            let name = data.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
            let rep = evaluate(&c, &name, &samples).map_err(|e| Failure::Data(e.to_string()))?;
            let text = if json { rep.to_json() } else { rep.to_text() };
            writeln!(out, "{}", text.trim_end()).map_err(io_err)?;
        }
        Command::Repl { model, canvas } => {
            let m = load(&model)?;
            let font = canvas.font()?;
            let c = classifier(&m, &font, &canvas)?;
            run_repl(&c, io::stdin().lock(), out).map_err(io_err)?;
        }
        Command::Render { out: path, channels, canvas, text } => {
            let fmt = ImageFormat::from_path(&path).map_err(|e| Failure::Usage(e.to_string()))?;
            let spec = canvas.spec(channels)?;
            let font = canvas.font()?;
            let (plan, img) = render_text(&text.join(" "), canvas.mode(), &spec, &font);
            let bytes = export_image(&img, fmt).map_err(|e| Failure::Data(e.to_string()))?;
            std::fs::write(&path, bytes).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
            if plan.truncated {
                eprintln!("warning: text truncated to {} tokens", plan.tokens.len());
            }
        }
        Command::Report { source, json } => {
            let g = load_graph(&source)?;
            report(&g, json, &mut out).map_err(io_err)?;
        }
        Command::Validate { source } => {
            let g = load_graph(&source)?;
            let v = g.validate(CHIP_BUDGET_BYTES);
            writeln!(out, "required {} B of {} B", v.required_bytes(), v.budget_bytes).map_err(io_err)?;
            if !v.is_valid() {
                let lines: Vec<String> = v.violations.iter().map(ToString::to_string).collect();
                return Err(Failure::Model(lines.join("\n")));
            }
            writeln!(out, "ok").map_err(io_err)?;
        }
        Command::Arch { desk, classes } => {
            let spec = if desk { ArchSpec::desk(classes) } else { ArchSpec::with_classes(classes) };
            write!(out, "{}", spec.to_kv_string()).map_err(io_err)?;
        }
        Command::Init { out: path, arch, labels, seed, ink } => {
            let model = if ink {
                ink_model()
            } else {
                let spec = match &arch {
                    Some(p) => read_arch(p)?,
                    None => ArchSpec::default(),
                };
                let labels = if !labels.is_empty() {
                    labels
                } else if spec.num_classes == DBPEDIA_LABELS.len() {
                    DBPEDIA_LABELS.iter().map(|s| s.to_string()).collect()
                } else {
                    Vec::new()
                };
                if !labels.is_empty() && labels.len() != spec.num_classes {
                    return Err(Failure::Usage(format!(
                        "{} labels for {} classes",
                        labels.len(),
                        spec.num_classes
                    )));
                }
                random_gnetfc(&spec, labels, seed).map_err(|e| Failure::Usage(e.to_string()))?
            };
            model.save(&path).map_err(model_err(&path))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
