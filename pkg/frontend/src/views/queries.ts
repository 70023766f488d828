import type { GatewayApi } from "../api.js";
import { clear, h } from "../dom.js";
import type { ConsoleStore } from "../state.js";
import type { SearchHit } from "../types.js";

const OPS = ["=", "!=", "<", "<=", ">", ">="];

/** Search launcher with ranked results, and a predicate builder over the
 * tables a data-query agent sees at its station. */
export class QueryView {
  private note = h("pre", { class: "outcome" });

  constructor(private root: HTMLElement, private store: ConsoleStore, private api: GatewayApi) {
    store.subscribe(() => this.refreshSelectors());
    this.render();
  }

  private searchOrigin = h("select", {}) as HTMLSelectElement;
  private searchStations = h("select", { multiple: "multiple", size: "3" }) as HTMLSelectElement;
  private queryAgent = h("select", {}) as HTMLSelectElement;

  private refreshSelectors(): void {
    for (const select of [this.searchOrigin, this.searchStations]) {
      const keep = select.value;
      clear(select);
      for (const station of this.store.stationRows()) {
        select.append(h("option", { value: station.stationId }, [station.stationId]));
      }
      if (keep) select.value = keep;
    }
    const keep = this.queryAgent.value;
    clear(this.queryAgent);
    for (const agent of this.store.agentRows()) {
      if (agent.behaviorId.startsWith("data-query/") && agent.runState === "ACTIVE") {
        this.queryAgent.append(h("option", { value: agent.agentId }, [agent.agentId]));
      }
    }
    if (keep) this.queryAgent.value = keep;
  }

  private endpointOf(stationId: string): string {
    const row = this.store.stationRows().find((s) => s.stationId === stationId);
    return row?.endpoint ?? "";
  }

  private async runSearch(terms: string, roots: string, resultsEl: HTMLElement): Promise<void> {
    try {
      const stations = [...this.searchStations.selectedOptions].map((o) => o.value);
      const itinerary = stations.map((s) => this.endpointOf(s)).filter(Boolean);
      const origin = this.endpointOf(this.searchOrigin.value);
      const { agent_id } = await this.api.launch({
        behavior_id: "search/1",
        dest: stations[0] ?? this.searchOrigin.value,
        params: {
          query_terms: terms.split(/\s+/).filter(Boolean),
          roots: roots.split(/\s+/).filter(Boolean),
          itinerary,
          origin,
        },
      });
      this.note.textContent = `search agent ${agent_id} launched; awaiting results…`;
      const deadline = Date.now() + 30_000;
      while (Date.now() < deadline) {
        await new Promise((resolve) => setTimeout(resolve, 500));
        const opened = await this.api.openSession(agent_id);
        if (opened.finished && opened.result_b64 !== undefined) {
          const text = new TextDecoder().decode(
            Uint8Array.from(atob(opened.result_b64), (c) => c.charCodeAt(0)),
          );
          const result = JSON.parse(text) as { hits: SearchHit[]; skipped_files: number };
          clear(resultsEl);
          resultsEl.append(
            h("tr", {}, [h("th", {}, ["weight"]), h("th", {}, ["station"]), h("th", {}, ["path"])]),
          );
          for (const hit of result.hits) {
            resultsEl.append(
              h("tr", {}, [
                h("td", {}, [String(hit.weight)]),
                h("td", {}, [hit.station_id]),
                h("td", {}, [hit.path]),
              ]),
            );
          }
          this.note.textContent = `${result.hits.length} hits, ${result.skipped_files} files skipped`;
          return;
        }
        if (opened.session_id) await this.api.closeSession(opened.session_id);
      }
      this.note.textContent = "search timed out";
    } catch (err) {
      this.note.textContent = String(err);
    }
  }

  private async runQuery(
    table: string,
    columns: string,
    clauses: Array<[string, string, string]>,
    gridEl: HTMLElement,
  ): Promise<void> {
    try {
      const opened = await this.api.openSession(this.queryAgent.value);
      if (!opened.session_id) throw new Error("agent is not attachable");
      const reply = await this.api.command(opened.session_id, {
        cmd: "query",
        table,
        columns: columns.trim() ? columns.split(/\s*,\s*/) : null,
        predicate: clauses,
      });
      await this.api.closeSession(opened.session_id);
      clear(gridEl);
      gridEl.append(h("tr", {}, reply.reply.columns.map((c: string) => h("th", {}, [c]))));
      for (const row of reply.reply.rows) {
        gridEl.append(h("tr", {}, row.map((cell: string) => h("td", {}, [cell]))));
      }
      this.note.textContent = `${reply.reply.rows.length} rows`;
    } catch (err) {
      this.note.textContent = String(err);
    }
  }

  render(): void {
    clear(this.root);
    const terms = h("input", { type: "text", placeholder: "query terms" }) as HTMLInputElement;
    const roots = h("input", { type: "text", value: "." }) as HTMLInputElement;
    const results = h("table", { class: "grid", "data-testid": "search-results" });
    const searchBtn = h("button", {}, ["Search"]) as HTMLButtonElement;
    searchBtn.onclick = () => void this.runSearch(terms.value, roots.value, results);

    const table = h("input", { type: "text", placeholder: "table" }) as HTMLInputElement;
    const columns = h("input", { type: "text", placeholder: "columns (a,b)" }) as HTMLInputElement;
    const clauseRows = h("div", {});
    const addClause = () => {
      const column = h("input", { type: "text", placeholder: "column" }) as HTMLInputElement;
      const op = h("select", {}) as HTMLSelectElement;
      for (const o of OPS) op.append(h("option", { value: o }, [o]));
      const value = h("input", { type: "text", placeholder: "literal" }) as HTMLInputElement;
      clauseRows.append(h("div", { class: "row clause" }, [column, op, value]));
    };
    const addBtn = h("button", {}, ["+ clause"]) as HTMLButtonElement;
    addBtn.onclick = addClause;
    const grid = h("table", { class: "grid", "data-testid": "query-results" });
    const catalogBtn = h("button", {}, ["Catalog"]) as HTMLButtonElement;
    catalogBtn.onclick = async () => {
      try {
        const opened = await this.api.openSession(this.queryAgent.value);
        if (!opened.session_id) throw new Error("agent is not attachable");
        const reply = await this.api.command(opened.session_id, { cmd: "catalog" });
        await this.api.closeSession(opened.session_id);
        this.note.textContent = JSON.stringify(reply.reply.tables, null, 2);
      } catch (err) {
        this.note.textContent = String(err);
      }
    };
    const queryBtn = h("button", {}, ["Query"]) as HTMLButtonElement;
    queryBtn.onclick = () => {
      const clauses: Array<[string, string, string]> = [];
      for (const row of clauseRows.querySelectorAll(".clause")) {
        const [column, value] = row.querySelectorAll("input");
        const op = row.querySelector("select") as HTMLSelectElement;
        if ((column as HTMLInputElement).value) {
          clauses.push([
            (column as HTMLInputElement).value,
            op.value,
            (value as HTMLInputElement).value,
          ]);
        }
      }
      void this.runQuery(table.value, columns.value, clauses, grid);
    };

    this.refreshSelectors();
    this.root.append(
      h("h3", {}, ["Search"]),
      h("div", { class: "row" }, [terms, roots, this.searchStations, this.searchOrigin, searchBtn]),
      results,
      h("h3", {}, ["Data query"]),
      h("div", { class: "row" }, [this.queryAgent, table, columns, catalogBtn, addBtn, queryBtn]),
      clauseRows,
      grid,
      this.note,
    );
  }
}
