import init, * as taxlog from "./pkg/taxlog_demo.js";

const $ = (id) => document.getElementById(id);

function table(head, rows) {
  const t = document.createElement("table");
  const tr = t.insertRow();
  for (const h of head) {
    const th = document.createElement("th");
    th.textContent = h;
    tr.appendChild(th);
  }
  for (const r of rows) {
    const row = t.insertRow();
    for (const c of r) row.insertCell().textContent = c ?? "";
  }
  return t;
}

function fmt(x) {
  return typeof x === "number" ? x.toFixed(3) : x;
}

await init();
$("status").textContent = "Ready.";
$("facts").value = taxlog.bundled_facts();

$("show-statutes").onclick = () => {
  $("statutes").value = taxlog.bundled_statutes();
};

$("solve").onclick = () => {
  const out = JSON.parse(
    taxlog.solve_query($("statutes").value, $("facts").value, $("query").value, Number($("depth").value) || 1)
  );
  if (out.solutions) {
    const lines = out.solutions.map((s) => {
      const b = Object.entries(s).map(([k, v]) => `${k} = ${v}`);
      return b.length ? b.join(", ") : "true";
    });
    $("solve-out").textContent = `${out.outcome}\n${lines.join("\n")}`;
  } else {
    $("solve-out").textContent = JSON.stringify(out, null, 2);
  }
};

$("audit").onclick = () => {
  const out = JSON.parse(
    taxlog.simulate_audit($("responder").value, Number($("n").value) || 1, Number($("audit-seed").value) || 0)
  );
  if (out.error) {
    $("audit-out").textContent = out.error;
    return;
  }
  const r = out.report;
  const rows = r.per_position.map((p) => `${p.position}  p_o ${fmt(p.p_o)}  p_e ${fmt(p.p_e)}  kappa ${fmt(p.kappa)}`);
  $("audit-out").textContent = [
    `min_contamination ${fmt(r.min_contamination)}`,
    `max_contamination ${fmt(r.max_contamination)}`,
    `best position ${r.best_position}${r.fallback ? " (fallback)" : ""}`,
    "",
    ...rows,
  ].join("\n");
};

$("perturb").onclick = () => {
  const out = JSON.parse(taxlog.perturb_rules(Number($("perturb-seed").value) || 0));
  const box = $("perturb-out");
  box.replaceChildren();
  if (out.error) {
    box.textContent = out.error;
    return;
  }
  box.appendChild(table(["statute value", "perturbed"], out.values.map((v) => [v.old, v.new])));
  if (out.flags.length) {
    const p = document.createElement("p");
    p.textContent = `flags: ${out.flags.join("; ")}`;
    box.appendChild(p);
  }
  box.appendChild(table(["case", "tax under r", "tax under r'"], out.cases.map((c) => [c.id, c.r, c.r_prime])));
};
