import init, { episodeHeatmap, attentionMasks, distractors, actionVerbs } from "./pkg/stvqa_web.js";

const $ = (section, sel) => document.querySelector(`#${section} ${sel}`);
const val = (section, name) => $(section, `[name=${name}]`).value;

function shade(v, max) {
  const x = max > 0 ? v / max : 0;
  const l = Math.round(95 - 70 * x);
  return `hsl(210, 70%, ${l}%)`;
}

function frame(grid, values, max, needle) {
  const el = document.createElement("div");
  el.className = needle ? "frame needle" : "frame";
  el.style.gridTemplateColumns = `repeat(${grid}, 14px)`;
  for (const v of values) {
    const cell = document.createElement("span");
    cell.style.background = shade(v, max);
    cell.title = v.toFixed(3);
    el.append(cell);
  }
  return el;
}

function guard(section, f) {
  return () => {
    const out = $(section, ".out");
    out.className = "out";
    try {
      f(out);
    } catch (e) {
      out.className = "out err";
      out.textContent = String(e.message ?? e);
    }
  };
}

function renderHeatmap(out) {
  const h = JSON.parse(episodeHeatmap(val("heatmap", "task"), +val("heatmap", "seed"), +val("heatmap", "steps"), +val("heatmap", "noise")));
  out.textContent = `${h.question} → ${h.answer}` + (h.needle === null ? "" : ` (marked step ${h.needle})`);
  const strip = $("heatmap", ".strip");
  strip.replaceChildren();
  const max = Math.max(...h.energy.flat());
  h.energy.forEach((cells, t) => strip.append(frame(h.grid, cells, max, t === h.needle)));
}

function renderAttention(out) {
  const a = JSON.parse(attentionMasks(val("attention", "variant"), val("attention", "task"), +val("attention", "seed"), +val("attention", "steps")));
  out.textContent = `${a.question} → predicted "${a.predicted}", gold "${a.answer}" ` +
    `(${a.correct ? "correct" : "wrong"}; ${a.steps_trained} steps, loss ${a.final_loss.toFixed(3)})`;
  const bars = $("attention", ".bars");
  bars.replaceChildren();
  for (const [t, w] of (a.temporal ?? []).entries()) {
    const bar = document.createElement("div");
    bar.style.height = `${Math.max(1, 80 * w)}px`;
    bar.title = `step ${t}: ${w.toFixed(3)}`;
    if (t === a.needle) bar.className = "needle";
    bars.append(bar);
  }
  const strip = $("attention", ".strip");
  strip.replaceChildren();
  a.spatial.forEach((mask, t) => strip.append(frame(a.grid, mask, 1, t === a.needle)));
}

function renderDistractors(out) {
  const d = JSON.parse(distractors(val("distractors", "answer"), +val("distractors", "dim"), +val("distractors", "seed")));
  out.textContent = `median similarity ${d.threshold.toFixed(3)}; chosen: ${d.chosen.join(", ")}`;
  const table = $("distractors", "table");
  table.replaceChildren();
  let cut = false;
  for (const [verb, sim] of d.similarities) {
    const row = table.insertRow();
    if (!cut && sim < d.threshold) {
      row.classList.add("cut");
      cut = true;
    }
    if (d.chosen.includes(verb)) row.classList.add("chosen");
    row.insertCell().textContent = verb;
    row.insertCell().textContent = sim.toFixed(3);
  }
}

await init();
const select = $("distractors", "[name=answer]");
for (const verb of JSON.parse(actionVerbs())) select.add(new Option(verb));
$("heatmap", "button").onclick = guard("heatmap", renderHeatmap);
$("attention", "button").onclick = guard("attention", renderAttention);
$("distractors", "button").onclick = guard("distractors", renderDistractors);
guard("heatmap", renderHeatmap)();
guard("distractors", renderDistractors)();
