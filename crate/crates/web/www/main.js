import init, { masks, ctc, ewc } from "./pkg/clft_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const vec = (id) => $(id).value.split(",").map((s) => Number(s.trim()));

function show(el, result, render) {
  if (result.error) {
    el.innerHTML = `<span class="err">${result.error}</span>`;
    return false;
  }
  el.textContent = render(result);
  return true;
}

function heat(el, rows, symbols, signed) {
  const t = rows.length;
  const k = rows[0].length;
  const max = Math.max(...rows.flat().map(Math.abs)) || 1;
  let html = '<table class="heat">';
  for (let c = 0; c < k; c++) {
    html += `<tr><th>${symbols[c]}</th>`;
    for (let r = 0; r < t; r++) {
      const v = rows[r][c] / max;
      const color = signed
        ? (v > 0 ? `rgba(200,40,40,${v})` : `rgba(40,80,200,${-v})`)
        : `rgba(20,120,60,${v})`;
      html += `<td style="background:${color}" title="${rows[r][c].toFixed(4)}"></td>`;
    }
    html += "</tr>";
  }
  el.innerHTML = html + "</table>";
}

function updateMasks() {
  const frames = num("m-frames");
  const r = JSON.parse(masks(frames, num("m-p"), num("m-span"), 16, num("m-seed")));
  const ok = show($("m-out"), r, (r) =>
    `exact mean coverage ${r.mean_coverage.toFixed(4)}, sampled ${r.empirical.toFixed(4)}`);
  if (!ok) return ($("m-grid").innerHTML = "");
  const rows = r.masks.map((m) => m.map((b) => (b ? 1 : 0)));
  rows.push(r.coverage);
  const grid = document.createElement("div");
  grid.className = "grid";
  grid.style.gridTemplateColumns = `repeat(${frames}, 1fr)`;
  rows.forEach((row, i) => row.forEach((v) => {
    const cell = document.createElement("div");
    cell.className = "cell";
    cell.style.background = i === rows.length - 1 ? `rgba(200,120,0,${v})` : (v ? "#345" : "#eee");
    grid.appendChild(cell);
  }));
  $("m-grid").replaceChildren(grid);
}

function updateCtc() {
  const r = JSON.parse(ctc(num("c-frames"), $("c-target").value, num("c-sharp"), num("c-seed")));
  const ok = show($("c-out"), r, (r) => `loss ${r.loss.toFixed(6)}   greedy decode "${r.decoded}"`);
  if (!ok) return ($("c-probs").innerHTML = $("c-grad").innerHTML = "");
  heat($("c-probs"), r.probs, r.symbols, false);
  heat($("c-grad"), r.grad, r.symbols, true);
}

function updateEwc() {
  const r = JSON.parse(ewc(num("e-lambda"), vec("e-theta"), vec("e-star"), vec("e-fisher")));
  show($("e-out"), r, (r) => `penalty ${r.penalty}   gradient [${r.grad.join(", ")}]`);
}

await init();
for (const [prefix, fn] of [["m-", updateMasks], ["c-", updateCtc], ["e-", updateEwc]]) {
  document.querySelectorAll(`input[id^="${prefix}"]`).forEach((el) => el.addEventListener("input", fn));
  fn();
}
