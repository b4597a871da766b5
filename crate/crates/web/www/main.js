import init, { cider, attention, triplet } from "./pkg/itm_web.js";

const $ = (id) => document.getElementById(id);
const fix = (x, d = 4) => x.toFixed(d);

function guarded(out, f) {
  return () => {
    out.classList.remove("error");
    try {
      f();
    } catch (e) {
      out.classList.add("error");
      out.textContent = String(e.message ?? e);
    }
  };
}

function runCider() {
  const r = JSON.parse(cider($("cider-candidate").value, $("cider-refs").value));
  const perN = r.per_n.map((v, i) => `  n=${i + 1}  ${fix(v, 6)}`).join("\n");
  $("cider-out").textContent = `score ${fix(r.score, 6)} over ${r.images} images\n${perN}`;
}

function runPool() {
  const r = JSON.parse(attention($("pool-features").value, Number($("pool-lambda").value)));
  const out = $("pool-out");
  out.replaceChildren();
  r.weights.forEach((w, i) => {
    const row = document.createElement("div");
    const bar = document.createElement("span");
    bar.className = "bar";
    bar.style.width = `${(w * 20).toFixed(2)}rem`;
    row.append(`region ${i}  ${fix(w)} `, bar);
    out.append(row);
  });
  const pooled = document.createElement("pre");
  pooled.textContent = `pooled [${r.pooled.map((x) => fix(x)).join(", ")}]`;
  out.append(pooled);
}

function runLoss() {
  const r = JSON.parse(triplet($("loss-scores").value, Number($("loss-margin").value)));
  const lines = r.anchors.map(
    (a, i) =>
      `anchor ${i}  image side ${fix(a.image_side)} (caption ${a.hardest_caption})` +
      `  caption side ${fix(a.caption_side)} (image ${a.hardest_image})`,
  );
  $("loss-out").textContent = `${lines.join("\n")}\ntotal ${fix(r.total)}`;
}

await init();
for (const [button, out, f] of [
  ["cider-run", "cider-out", runCider],
  ["pool-run", "pool-out", runPool],
  ["loss-run", "loss-out", runLoss],
]) {
  const run = guarded($(out), f);
  $(button).addEventListener("click", run);
  run();
}
